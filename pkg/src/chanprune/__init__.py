"""Channel pruning of Darknet YOLO detectors guided by batch-norm scaling factors."""
from pathlib import Path

from .cfg import NetworkDef, emit_cfg, load_cfg, parse_cfg, save_cfg, validate
from .errors import ChanpruneError, InputFormatError
from .graph import cost_report, count_flops, count_params, infer_shapes
from .inference import run_network
from .pruner import PRESETS, PruneConfig, iterative_prune, prune
from .transforms import insert_spp, set_classes
from .weights import WeightStore, load_weights, read_weights, save_weights, write_weights

__version__ = "0.1.0"

CONFIG_DIR = Path(__file__).with_name("configs")


def fixture_path(name: str) -> Path:
    """Path of a bundled cfg, e.g. ``fixture_path("yolov3-tiny")``."""
    path = CONFIG_DIR / (name if name.endswith(".cfg") else name + ".cfg")
    if not path.exists():
        raise FileNotFoundError(f"no bundled config {name!r}; have "
                                f"{sorted(p.stem for p in CONFIG_DIR.glob('*.cfg'))}")
    return path
