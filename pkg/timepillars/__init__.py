"""
Recurrent pillar-based 3D object detection on LiDAR sequences.

Raw point clouds are grouped into vertical pillars, encoded into a
pseudo-image, passed through a 2D backbone and a convolutional GRU whose
hidden state is motion-compensated between scans, and decoded into rotated
boxes for vehicles, cyclists and pedestrians.
"""

from .config import RunConfig, load_config
from .dataio import Scan, Sequence, generate_scene, load_sequence, save_sequence
from .evaluation import evaluate
from .geometry import RotatedBox
from .network import Detector, build_model, model_forward
from .pillars import GridSpec, pillarize

__version__ = "0.1.0"
