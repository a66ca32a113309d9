"""Line-oriented ``section.key = value`` run configuration.

Every knob of every stage lives in one schema with a documented default;
unknown keys are rejected so experiment files stay honest. All randomness
derives from the single ``seed`` through named substreams.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .features import FbankConfig
from .models import ModelConfig
from .pipeline import InferenceConfig, StageSpec, TrainSchedule


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated ints, got {raw!r}") from exc


def _parse_opt_float(raw: str):
    if raw in ("auto", "none"):
        return None
    return float(raw)


# key -> (default, parser, help)
SCHEMA: dict[str, tuple] = {
    "seed": (1234, int, "global seed; every stage derives a named substream"),
    "out_dir": ("out", str, "artifact directory (env TSDIAR_OUT overrides)"),
    "workers": (0, int, "thread workers for per-recording stages; 0 = cpu count"),
    # synthetic corpus
    "synth.n_speakers": (8, int, "distinct synthetic voices"),
    "synth.sample_rate": (16000, int, "corpus sample rate in Hz"),
    "synth.n_channels": (2, int, "microphone channels per recording"),
    "synth.n_recordings": (8, int, "total recordings"),
    "synth.duration": (75.0, float, "seconds per recording"),
    "synth.speakers_per_recording": (4, int, "voices per meeting"),
    "synth.overlap_ratio": (0.3, float, "target overlapped/total speech ratio"),
    "synth.n_train": (4, int, "recordings in the training split"),
    "synth.n_val": (2, int, "recordings in the validation split"),
    # features
    "feature.n_mels": (80, int, "mel filterbank size"),
    "feature.frame_length_ms": (25.0, float, "analysis window in ms"),
    "feature.frame_shift_ms": (10.0, float, "hop in ms"),
    "feature.f_min": (20.0, float, "lowest filter edge in Hz"),
    "feature.f_max": (None, _parse_opt_float, "highest filter edge in Hz; auto = 0.95*Nyquist"),
    "feature.log_floor": (1e-10, float, "clamp below this energy before log"),
    # model
    "model.embed_dim": (128, int, "speaker embedding width D"),
    "model.conv_widths": ((16, 32, 64, 128), _parse_int_tuple, "front-end stage widths"),
    "model.conv_strides": ((1, 2, 2, 2), _parse_int_tuple, "front-end stage strides"),
    "model.encoder_layers": (2, int, "per-speaker encoder depth"),
    "model.encoder_heads": (4, int, "per-speaker encoder heads"),
    "model.ff_mult": (4, int, "feed-forward width multiplier"),
    "model.lstm_hidden": (128, int, "BiLSTM hidden units per direction"),
    "model.n_speakers": (4, int, "output slots N"),
    "model.channel_layers": (2, int, "cross-channel encoder depth"),
    "model.channel_heads": (2, int, "cross-channel encoder heads"),
    "model.pe_scale": (0.1, float, "positional-encoding amplitude vs embeddings"),
    "model.dtype": ("float32", str, "float32 for training, float64 for checks"),
    # embedding training
    "embed.steps": (300, int, "arcface training steps"),
    "embed.batch": (16, int, "crops per step"),
    "embed.lr": (1e-3, float, "arcface adam learning rate"),
    "embed.crop": (2.0, float, "training crop length in seconds"),
    "embed.min_segment": (2.0, float, "drop pool segments shorter than this"),
    # ts-vad schedule
    "schedule.stage1_epochs": (10, int, "frozen-front-end epochs"),
    "schedule.stage2_epochs": (10, int, "joint epochs"),
    "schedule.stage3_epochs": (20, int, "fine-tune epochs (paper scale: 200)"),
    "schedule.stage1_lr": (1e-4, float, "stage 1 learning rate"),
    "schedule.stage2_lr": (1e-4, float, "stage 2 learning rate"),
    "schedule.stage3_lr": (1e-5, float, "stage 3 learning rate"),
    "schedule.chunk": (16.0, float, "training chunk seconds"),
    "schedule.steps_per_epoch": (10, int, "optimizer steps per epoch"),
    "schedule.batch": (1, int, "chunks averaged per optimizer step"),
    "schedule.keep_best": (5, int, "checkpoints averaged from the final stage"),
    "schedule.skip_stage1": (False, _parse_bool, "ablation: fold stage 1 into joint"),
    # inference
    "inference.chunk": (16.0, float, "inference chunk seconds"),
    "inference.shift": (4.0, float, "chunk shift seconds"),
    "inference.median_window": (7, int, "median smoothing window (odd)"),
    "inference.rounds": (3, int, "TS-VAD refinement rounds"),
    "inference.threshold": (0.5, float, "binarization threshold"),
    "inference.min_duration": (0.2, float, "drop decoded segments shorter than this"),
    "inference.gap_bridge": (0.3, float, "bridge decoded gaps shorter than this"),
    # clustering init
    "cluster.window": (1.28, float, "uniform segmentation window"),
    "cluster.shift": (0.64, float, "uniform segmentation shift"),
    "cluster.max_speakers": (4, int, "eigengap search cap"),
    "cluster.jitter_sigma": (0.0, float, "additive embedding jitter (0 = off)"),
    "cluster.prune_percentile": (80.0, float, "affinity row-pruning percentile (0 = off)"),
    # fusion
    "fusion.weighting": ("rank", str, "rank | uniform"),
    "fusion.rank_power": (0.1, float, "weight = rank^-p"),
    "fusion.overlap_cap": (4, int, "max simultaneous speakers in fused output"),
    # scoring
    "scoring.collar": (0.25, float, "no-score collar around reference boundaries"),
    "scoring.score_overlap": (True, _parse_bool, "score overlapped regions"),
}


class RunConfig:
    """Typed view over the schema with file + command-line overrides."""

    def __init__(self, values: dict | None = None):
        self._values = {k: v[0] for k, v in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            self._values[k] = v

    @staticmethod
    def load(path) -> "RunConfig":
        cfg = RunConfig()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            cfg.set(key.strip(), raw.strip())
        return cfg

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][1]
        try:
            if parser in (int, float):
                self._values[key] = parser(raw)
            else:
                self._values[key] = parser(raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc

    def apply_overrides(self, pairs: list[str]) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, _, raw = pair.partition("=")
            self.set(key.strip(), raw.strip())

    def get(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __getitem__(self, key: str):
        return self.get(key)

    # -- typed builders ------------------------------------------------------------

    def fbank_config(self) -> FbankConfig:
        return FbankConfig(
            sample_rate=self["synth.sample_rate"],
            n_mels=self["feature.n_mels"],
            frame_length_ms=self["feature.frame_length_ms"],
            frame_shift_ms=self["feature.frame_shift_ms"],
            f_min=self["feature.f_min"],
            f_max=self["feature.f_max"],
            log_floor=self["feature.log_floor"],
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_mels=self["feature.n_mels"],
            embed_dim=self["model.embed_dim"],
            conv_widths=self["model.conv_widths"],
            conv_strides=self["model.conv_strides"],
            encoder_layers=self["model.encoder_layers"],
            encoder_heads=self["model.encoder_heads"],
            ff_mult=self["model.ff_mult"],
            lstm_hidden=self["model.lstm_hidden"],
            n_speakers=self["model.n_speakers"],
            channel_layers=self["model.channel_layers"],
            channel_heads=self["model.channel_heads"],
            pe_scale=self["model.pe_scale"],
            dtype=self["model.dtype"],
        )

    def train_schedule(self) -> TrainSchedule:
        schedule = TrainSchedule(
            stages=(
                StageSpec(
                    "frozen-front-end",
                    self["schedule.stage1_epochs"],
                    self["schedule.stage1_lr"],
                    freeze_front_end=True,
                    source="sim",
                ),
                StageSpec("joint", self["schedule.stage2_epochs"], self["schedule.stage2_lr"], source="sim"),
                StageSpec("fine-tune", self["schedule.stage3_epochs"], self["schedule.stage3_lr"], source="real"),
            ),
            chunk_length=self["schedule.chunk"],
            steps_per_epoch=self["schedule.steps_per_epoch"],
            batch=self["schedule.batch"],
            keep_best=self["schedule.keep_best"],
        )
        if self["schedule.skip_stage1"]:
            schedule = schedule.without_stage1()
        return schedule

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(
            chunk=self["inference.chunk"],
            shift=self["inference.shift"],
            median_window=self["inference.median_window"],
            rounds=self["inference.rounds"],
            threshold=self["inference.threshold"],
            min_duration=self["inference.min_duration"],
            gap_bridge=self["inference.gap_bridge"],
        )

    def synth_config(self):
        from .simulation import SynthConfig

        return SynthConfig(
            sample_rate=self["synth.sample_rate"],
            n_channels=self["synth.n_channels"],
            n_recordings=self["synth.n_recordings"],
            duration=self["synth.duration"],
            speakers_per_recording=self["synth.speakers_per_recording"],
            overlap_ratio=self["synth.overlap_ratio"],
        )


def substream(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-module random stream derived from the global seed."""
    return np.random.default_rng([seed] + list(name.encode("utf-8")))


def describe_keys(prefixes: tuple[str, ...]) -> str:
    """Help text for the schema keys a subcommand reads."""
    lines = []
    for key, (default, _parser, help_text) in SCHEMA.items():
        section = key.split(".")[0] if "." in key else key
        if section in prefixes or key in prefixes:
            lines.append(f"  {key} (default {default!r}): {help_text}")
    return "config keys read by this command:\n" + "\n".join(lines)
