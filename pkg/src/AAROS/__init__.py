from .config import RunConfig as RunConfig
from .config import load_run_config as load_run_config
from .core import BBox as BBox
from .core import GridImage as GridImage
from .core import Response as Response
from .core import Sample as Sample
from .core import iou as iou
from .errors import AAROSError as AAROSError
from .evaluation import EvalPlan as EvalPlan
from .evaluation import EvalReport as EvalReport
from .evaluation import evaluate as evaluate
from .logging import AAROSLogger as AAROSLogger
from .model import ModelConfig as ModelConfig
from .model import PolicyModel as PolicyModel
from .synthworld import SplitPlan as SplitPlan
from .synthworld import WorldConfig as WorldConfig
from .synthworld import generate_dataset as generate_dataset
from .tokenizer import Vocab as Vocab
from .train import AarConfig as AarConfig
from .train import SftConfig as SftConfig
from .train import run_aar as run_aar
from .train import run_sft as run_sft

__version__ = "0.1"
__license__ = "MIT License"
__year__ = "2026"
