"""evdetr: asynchronous event + frame streaming object detection.

A self-contained desk-scale detector: DAVIS-style sensor simulation,
event-stream representations, temporal deformable attention over two
visual streams, asynchronous attention-mask fusion, DETR-style set
prediction, and a COCO-style evaluator.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .events import EventStream, SensorGeometry
from .model import ModelConfig, StreamingDetector
from .simulator import CameraModel, SceneObject, SceneScript
from .tensor import Parameter, RngStream, Tensor, backward, no_grad

__all__ = [
    "CameraModel",
    "EventStream",
    "ModelConfig",
    "Parameter",
    "RngStream",
    "RunConfig",
    "SceneObject",
    "SceneScript",
    "SensorGeometry",
    "StreamingDetector",
    "Tensor",
    "backward",
    "no_grad",
    "__version__",
]
