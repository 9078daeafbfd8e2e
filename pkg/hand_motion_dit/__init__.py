from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, ScheduleConfig, make_schedule, sample, training_loss
from .dit import DiTConfig, DiTModel, build_model
from .errors import *
from .formats import MotionClip, load_clip, load_features, save_clip, save_features
from .kinematics import HandParams, HandPoseFrame, HandSkeleton
from .metrics import MetricReport, evaluate
from .pipeline import SynthSpec, make_batch, synth_dataset
from .reader import DictReader, FileReader, Reader, ReaderOptions
from .runner import CommandRunner, RunOptions
from .training import RunConfig, Trainer, TrainingConfig
