"""
Run the hand-motion-dit commands.
"""

import json
import logging
import os
import re
import traceback
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from termcolor import colored

import hand_motion_dit.errors as errors
from hand_motion_dit.checkpoint import load_checkpoint, model_from_checkpoint
from hand_motion_dit.conditioning import (
    IDENTITY_OFFSET,
    ConditionBundle,
    StyleTable,
    derive_hand_masks,
    reference_context,
)
from hand_motion_dit.diffusion import sample, schedule_from_config
from hand_motion_dit.formats import (
    MotionClip,
    load_clip,
    load_features,
    save_clip,
    save_features,
    write_csv,
)
from hand_motion_dit.kinematics import HandPoseFrame, HandSkeleton
from hand_motion_dit.metrics import (
    evaluate,
    hand_distribution,
    write_distribution,
)
from hand_motion_dit.pipeline import (
    SynthSpec,
    align_audio,
    extract_history,
    load_synth_spec,
    synth_dataset,
    write_dataset,
)
from hand_motion_dit.reader import FileReader, ReaderOptions, load_skeleton
from hand_motion_dit.stage2 import (
    PrepOptions,
    prepare_clip,
    rasterize_hands,
    save_heatmaps,
    write_preview,
)
from hand_motion_dit.training import Trainer, load_run_config
from hand_motion_dit.validators import (
    check_audio,
    check_finite,
    check_keypoints,
    check_quaternions,
    check_recording,
    check_style,
    load_document,
)

LOG_ENV = "HAND_MOTION_DIT_LOG"
DEFAULT_AMPLITUDE = 0.01
SAMPLE_LOG = "sample_log.csv"

logger = logging.getLogger(__name__)


class ExitCode(IntEnum):
    OK = 0
    FAILURE = 1
    CONFIG = 2
    DATA_FORMAT = 3
    NUMERIC = 4


def exit_code(err: BaseException) -> int:
    match err:
        case errors.ConfigError() | FileNotFoundError():
            return ExitCode.CONFIG
        case errors.DataFormatError():
            return ExitCode.DATA_FORMAT
        case errors.NumericError():
            return ExitCode.NUMERIC
        case _:
            return ExitCode.FAILURE


class ColorFormatter(logging.Formatter):
    COLORS = {
        "DEBUG": "blue",
        "INFO": "green",
        "WARNING": "yellow",
        "ERROR": "red",
        "CRITICAL": "red",
    }

    def format(self, record: logging.LogRecord) -> str:
        record = logging.makeLogRecord(record.__dict__)
        record.levelname = colored(record.levelname, self.COLORS.get(record.levelname, "white"))
        return super().format(record)


def configure_logging(level: Optional[str] = None) -> None:
    """Send package logs to stderr at `level`, or at the level named by
    HAND_MOTION_DIT_LOG (default WARNING)."""
    name = (level or os.environ.get(LOG_ENV) or "WARNING").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise errors.InvalidConfigError(LOG_ENV, f"unknown log level `{name}`")

    package = logging.getLogger("hand_motion_dit")
    for handler in list(package.handlers):
        if isinstance(handler.formatter, ColorFormatter):
            package.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(ColorFormatter("%(levelname)s %(name)s: %(message)s"))
    package.addHandler(handler)
    package.setLevel(numeric)


@dataclass
class RunOptions:
    """Options of every command. Each command reads the fields it needs."""

    out: Optional[Path] = None
    """Directory receiving every file a command writes."""

    seed: int = 0

    spec: Optional[Path] = None
    """synth: synthetic dataset spec (JSON). Defaults apply when omitted."""

    config: Optional[Path] = None
    """train: run config (JSON)."""

    resume: Optional[Path] = None
    """train: checkpoint to continue from."""

    checkpoint: Optional[Path] = None
    """sample: trained checkpoint."""

    audio: Optional[Path] = None
    """sample: FEAT audio features to condition on."""

    style: Optional[str] = None
    """sample: style name; the first style of the checkpoint when omitted."""

    amplitude: list[float] = field(default_factory=lambda: [DEFAULT_AMPLITUDE])
    """sample: target amplitude, one value for both hands or left and right."""

    history: Optional[Path] = None
    """sample: MCLIP whose last frames precede the first sample."""

    reference: Optional[Path] = None
    """sample: FEAT reference-context vector."""

    count: int = 1
    length: Optional[int] = None
    """sample: frames per sample; all aligned audio that fits when omitted."""

    chain: bool = False
    """sample: feed each sample's tail to the next as history and advance
    through the audio."""

    generated: Optional[Path] = None
    """eval: directory of generated MCLIP files named <audio>.s<k>.mclip."""

    references: Optional[Path] = None
    """eval: dataset directory or directory of ground-truth MCLIP files."""

    audio_dir: Optional[Path] = None
    """eval: directory of <audio>.feat files."""

    sigma: float = 0.1
    delta: float = 0.1
    window: Optional[int] = None
    """eval: FGD window in frames; one second when omitted."""

    grid: int = 32
    """eval: cells per axis of the hand-position histogram."""

    clips: Optional[Path] = None
    """prep: dataset directory or directory of MCLIP files."""

    kernel: int = 31
    raster: tuple[int, int] = (64, 64)
    """prep: height and width of every map."""

    sigma_px: float = 2.0
    skeleton: Optional[Path] = None
    """eval, prep: skeleton template JSON; the built-in template when omitted."""

    dataset: Optional[Path] = None
    """validate: dataset directory or manifest."""


def _output_dir(path: Optional[Path]) -> Path:
    out = Path(path) if path is not None else Path("out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError:
        raise errors.UnwritableOutputError(str(out))
    if not os.access(out, os.W_OK):
        raise errors.UnwritableOutputError(str(out))
    return out


def _require(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise errors.InvalidConfigError(flag, "is required")
    if not Path(path).exists():
        raise errors.InvalidConfigError(str(path), "file not found")
    return Path(path)


def _skeleton(path: Optional[Path]) -> HandSkeleton:
    return load_skeleton(path) if path is not None else HandSkeleton()


def load_motion_dir(path: Path) -> tuple[dict[str, MotionClip], dict[str, Any]]:
    """Clips by id, and audio tracks by id when `path` holds a dataset."""
    path = Path(path)
    if (path / "manifest.json").exists() or path.is_file():
        reader = FileReader(path)
        return (
            {k: reader[k].clip for k in reader.ids()},
            {k: reader[k].audio for k in reader.ids()},
        )
    return {p.stem: load_clip(p) for p in sorted(path.glob("*.mclip"))}, {}


_SAMPLE_NAME = re.compile(r"^(?P<stem>.+)\.s\d+$")


def sample_stem(name: str) -> str:
    """`speech.s3` -> `speech`; other names are their own stem."""
    m = _SAMPLE_NAME.match(name)
    return m.group("stem") if m else name


class CommandRunner:
    def __init__(self, options: RunOptions):
        self.options = options
        self.results: list[tuple[str, bool]] = []

    def txt_fail(self, text: str):
        return colored(text, "red")

    def txt_warn(self, text: str):
        return colored(text, "yellow")

    def txt_crash(self, text: str):
        return colored(text, "black", "on_red")

    def txt_info(self, text: str):
        return colored(text, "blue")

    def txt_pass(self, text: str):
        return colored(text, "green")

    def txt_highlight(self, text: str):
        return colored(text, "light_grey", "on_cyan")

    def txt_emphasize(self, text: str):
        return colored(text, "white")

    def stage(self, label: str, code: Callable[[], Optional[str]]) -> None:
        """Run one step of a command and report PASS or FAIL for it."""
        print("")
        print(self.txt_info("STAGE") + ":", self.txt_emphasize(label))
        try:
            message = code()
        except Exception:
            self.results.append((label, False))
            raise
        self.results.append((label, True))
        print("  ", self.txt_pass("PASS") + ":", message or "done")

    def check(self, label: str, collector: errors.Collector, code: Callable[[], None]) -> bool:
        """Run a validation step; every problem in `collector` is printed."""
        print("")
        print(self.txt_info("TESTING") + ":", self.txt_emphasize(label))
        code()
        failures = 0
        for err in collector.flush():
            if isinstance(err, errors.HandMotionWarning):
                print("  ", self.txt_warn("WARNING") + ":", err)
            else:
                failures += 1
                print("  ", self.txt_fail("ERROR") + ":", err)
        if failures == 0:
            print("  ", self.txt_pass("PASS") + ":", "No problems identified.")
        self.results.append((label, failures == 0))
        return failures == 0

    def _run(self, title: str, body: Callable[[], int]) -> int:
        code = int(ExitCode.OK)
        self.results = []
        print(self.txt_emphasize(f"===[ hand-motion-dit {title} ]==="))
        try:
            code = body()
        except (errors.HandMotionError, FileNotFoundError) as err:
            print("  ", self.txt_crash("FATAL") + ":", err)
            code = exit_code(err)
        except Exception as err:
            print("Encountered an unexpected exception:")
            traceback.print_exception(err)
            code = int(ExitCode.FAILURE)
        finally:
            print("")
            print(self.txt_emphasize("SUMMARY"))
            for label, ok in self.results:
                if ok:
                    print("  ", self.txt_pass("PASSED") + ":", label)
                else:
                    print("  ", self.txt_fail("FAILED") + ":", label)
            print("")
        return code

    # synth

    def synth(self) -> int:
        return self._run("synth", self._synth)

    def _synth(self) -> int:
        o = self.options
        spec = SynthSpec()
        if o.spec is not None:
            path = _require(o.spec, "--spec")

            def read_spec():
                nonlocal spec
                spec = load_synth_spec(path)

            self.stage("Synthetic dataset spec is valid", read_spec)

        out = _output_dir(o.out)
        print("Writing dataset to:", self.txt_highlight(str(out)))
        dataset = synth_dataset(spec, o.seed)
        self.stage(
            "Dataset files are written",
            lambda: f"{len(dataset.entries)} clips, manifest {write_dataset(dataset, out).name}",
        )
        self.stage("Emitted clips load back", lambda: f"{len(FileReader(out))} clips read")
        return ExitCode.OK

    # train

    def train(self) -> int:
        return self._run("train", self._train)

    def _train(self) -> int:
        o = self.options
        config = load_run_config(_require(o.config, "--config"))
        out = _output_dir(o.out if o.out is not None else config.out)
        print("Training run in:", self.txt_highlight(str(out)))

        reader = FileReader(config.manifest)
        trainer = Trainer(config, reader)
        if o.resume is not None:
            checkpoint = load_checkpoint(_require(o.resume, "--resume"))
            self.stage("Checkpoint restored", lambda: trainer.resume(checkpoint))

        with open(out / "run_config.json", "w") as file:
            json.dump(config.document(), file, indent=2, sort_keys=True)
            file.write("\n")

        def run():
            written = trainer.run(out)
            last = trainer.losses[-1] if trainer.losses else float("nan")
            return f"{trainer.step} steps, final loss {last:.6f}, {len(written)} checkpoints"

        self.stage("Training completes", run)
        return ExitCode.OK

    # sample

    def sample(self) -> int:
        return self._run("sample", self._sample)

    def _sample(self) -> int:
        o = self.options
        checkpoint = load_checkpoint(_require(o.checkpoint, "--ckpt"))
        audio_path = _require(o.audio, "--audio")
        track = load_features(audio_path)
        model = model_from_checkpoint(checkpoint)
        schedule = schedule_from_config(checkpoint.schedule)
        cfg = checkpoint.config
        if track.dim != cfg.audio_dim:
            raise errors.MismatchedDatasetError(
                f"{audio_path} has {track.dim} features, the model expects {cfg.audio_dim}"
            )

        styles = StyleTable(list(checkpoint.styles))
        style = styles.id_of(o.style) if o.style is not None else 0
        if len(o.amplitude) not in (1, 2) or min(o.amplitude) < 0:
            raise errors.InvalidConfigError("--amplitude", "expects one or two values >= 0")
        amplitude = np.array(o.amplitude * 2 if len(o.amplitude) == 1 else o.amplitude, dtype=float)
        history_clip = load_clip(_require(o.history, "--history")) if o.history else None
        reference = (
            reference_context(_require(o.reference, "--reference"), cfg.ref_dim)
            if o.reference
            else None
        )

        length = o.length
        if length is None:
            _, valid = align_audio(track, checkpoint.fps, cfg.capacity)
            length = max(1, int(valid.sum()))
        out = _output_dir(o.out)
        stem = audio_path.name.split(".")[0]
        activations = model.speed.activations(amplitude[None])[0]

        rows = []
        seeds = np.random.SeedSequence(o.seed).spawn(o.count)
        previous = history_clip
        for k in range(o.count):
            rng = np.random.default_rng(seeds[k])
            start = k * length if o.chain else 0
            features, audio_mask = align_audio(track, checkpoint.fps, cfg.capacity, start)
            history = extract_history(
                previous if o.chain else history_clip, cfg.history_len, cfg.motion_dim
            )
            condition = ConditionBundle(
                audio=features,
                audio_mask=audio_mask,
                style=style,
                amplitude=amplitude,
                root_offset=IDENTITY_OFFSET.copy(),
                hand_mask=derive_hand_masks(np.ones((length, 2), dtype=bool), length, cfg.capacity),
                reference=reference,
            )
            x = sample(model, schedule, length, condition, history, rng)
            clip = MotionClip.from_frame_vectors(
                x,
                checkpoint.fps,
                cfg.keypoint_count,
                style=style,
                root_offset=IDENTITY_OFFSET.copy(),
            )
            clip.keypoints = np.clip(clip.keypoints, 0.0, 1.0)
            path = out / f"{stem}.s{k}.mclip"
            save_clip(path, clip)
            if o.chain:
                save_features(out / f"{stem}.s{k}.history.feat", history.frames, checkpoint.fps)
                previous = load_clip(path)
            rows.append(
                [
                    path.name,
                    k,
                    styles.name_of(style),
                    repr(float(amplitude[0])),
                    repr(float(amplitude[1])),
                    " ".join(repr(float(v)) for v in activations[0]),
                    " ".join(repr(float(v)) for v in activations[1]),
                ]
            )
            print("  ", self.txt_pass("WROTE") + ":", path.name)

        write_csv(
            out / SAMPLE_LOG,
            ["file", "index", "style", "amplitude_left", "amplitude_right", "buckets_left", "buckets_right"],
            rows,
        )
        self.results.append((f"{o.count} samples written", True))
        return ExitCode.OK

    # eval

    def evaluate(self) -> int:
        return self._run("eval", self._evaluate)

    def _evaluate(self) -> int:
        o = self.options
        generated_dir = _require(o.generated, "--generated")
        generated: dict[str, list[np.ndarray]] = {}
        fps_seen: set[int] = set()
        for path in sorted(generated_dir.glob("*.mclip")):
            clip = load_clip(path)
            fps_seen.add(clip.fps)
            generated.setdefault(sample_stem(path.stem), []).append(clip.motion)
        if not generated:
            raise errors.InvalidConfigError(str(generated_dir), "holds no .mclip files")

        references: dict[str, np.ndarray] = {}
        tracks: dict[str, Any] = {}
        if o.references is not None:
            clips, tracks = load_motion_dir(_require(o.references, "--reference"))
            references = {k: c.motion for k, c in clips.items()}
            fps_seen |= {c.fps for c in clips.values()}
        if len(fps_seen) != 1:
            raise errors.MismatchedDatasetError(
                f"clips are recorded at different frame rates: {sorted(fps_seen)}"
            )
        fps = fps_seen.pop()
        if o.audio_dir is not None:
            audio_dir = _require(o.audio_dir, "--audio")
            tracks = {p.name.split(".")[0]: load_features(p) for p in sorted(audio_dir.glob("*.feat"))}

        audio = {}
        for stem, motions in generated.items():
            if stem in tracks:
                audio[stem] = align_audio(tracks[stem], fps, max(len(m) for m in motions))

        collector = errors.Collector(throw=False)
        report = evaluate(
            generated,
            references,
            audio,
            fps,
            _skeleton(o.skeleton),
            sigma=o.sigma,
            delta=o.delta,
            window=o.window if o.window is not None else fps,
            collector=collector,
        )
        for warning in collector.flush():
            print("  ", self.txt_warn("WARNING") + ":", warning)

        out = _output_dir(o.out)
        report.write_text(out / "report.txt")
        report.write_csv(out / "report.csv")
        for key, value in report.items():
            print("  ", self.txt_emphasize(key), "=", value)

        samples = [m for s in sorted(generated) for m in generated[s]]
        self.stage(
            "Hand position histograms are written",
            lambda: ", ".join(p.name for p in write_distribution(out, hand_distribution(samples, o.grid))),
        )
        return ExitCode.OK

    # prep

    def prep(self) -> int:
        return self._run("prep", self._prep)

    def _prep(self) -> int:
        o = self.options
        options = PrepOptions(o.kernel, o.raster[0], o.raster[1], o.sigma_px)
        clips, _ = load_motion_dir(_require(o.clips, "--clips"))
        skeleton = _skeleton(o.skeleton)
        out = _output_dir(o.out)
        h, w = options.height, options.width

        self.stage(
            "Identity pose renders",
            lambda: write_preview(
                out / "identity.hands.pgm", rasterize_hands(HandPoseFrame.identity(), skeleton, h, w)
            ),
        )

        def run():
            for clip_id, clip in clips.items():
                prepared = prepare_clip(clip, skeleton, options)
                save_clip(out / f"{clip_id}.filtered.mclip", prepared.clip)
                if clip.keypoint_count:
                    save_heatmaps(out / f"{clip_id}.keypoints.feat", prepared.keypoint_maps, clip.fps)
                    write_preview(out / f"{clip_id}.keypoints.pgm", prepared.keypoint_maps[0])
                save_heatmaps(out / f"{clip_id}.hands.feat", prepared.hand_maps, clip.fps)
                write_preview(out / f"{clip_id}.hands.pgm", prepared.hand_maps[0])
            return f"{len(clips)} clips prepared"

        self.stage("Signals are prepared", run)
        return ExitCode.OK

    # validate

    def validate(self) -> int:
        return self._run("validate", self._validate)

    def _validate(self) -> int:
        path = _require(self.options.dataset, "dataset")
        manifest = path if path.is_file() else path / "manifest.json"
        print("Validating dataset at:", self.txt_highlight(str(manifest)))

        collector = errors.Collector(throw=False)
        if not self.check(
            "Manifest matches its schema",
            collector,
            lambda: load_document(manifest, "manifest", collector),
        ):
            return ExitCode.CONFIG

        # Read as stored so the checks below report every problem.
        loaded: list[FileReader] = []

        def load():
            loaded.append(FileReader(ReaderOptions(base_path=manifest, strict=False), collector))
            return f"{len(loaded[0])} clips"

        self.stage("Clips and audio can be loaded", load)
        reader = loaded[0]
        info = reader.info

        def each(check):
            return lambda: reader.apply(lambda r, k: check(r[k].clip, k))

        checks = [
            ("Frame values are finite", each(lambda c, k: check_finite(c, k, collector))),
            (
                "Quaternions are canonical unit quaternions",
                each(lambda c, k: check_quaternions(c, k, collector)),
            ),
            ("Keypoints lie in [0, 1]", each(lambda c, k: check_keypoints(c, k, collector))),
            (
                "Style ids are known",
                each(lambda c, k: check_style(c, k, collector, info.styles.names)),
            ),
            (
                "Clips match the manifest",
                each(lambda c, k: check_recording(c, k, collector, info.fps, info.keypoint_count)),
            ),
            (
                "Audio matches the manifest",
                lambda: reader.apply(lambda r, k: check_audio(r, k, collector)),
            ),
        ]
        passed = [self.check(label, collector, code) for label, code in checks]
        return ExitCode.OK if all(passed) else ExitCode.DATA_FORMAT
