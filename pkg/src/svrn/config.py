"""Run configuration: every knob of a training/eval run in one dataclass.

Configs live in plain-text key = value files ('#' starts a comment).  The
parsed config fully determines a run given its seed, and its text form is
embedded in every saved model so runs stay reproducible.
"""

import dataclasses
from dataclasses import dataclass

VARIANTS = ("CNN-S", "CNN-Deep", "RNN", "RNN-G")
STAGES = ("1", "2-eye", "2-nose", "2-mouth")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    variant: str = "RNN-G"
    stage: str = "1"
    input_size: int = 128
    num_classes: int = 3
    vocabulary: str = "coarse"
    # optimization
    seed: int = 0
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 0          # epochs between decays; 0 disables
    grad_clip_norm: float = 1.0      # global-norm clip before sgd; 0 disables
    # losses and sampling
    loss_w_coarse: float = 1.0
    loss_w_gate: float = 1.0
    loss_w_final: float = 1.0
    boundary_neg_ratio: int = 5
    bg_sampling_factor: int = 0      # 0 = off; 5 for multi-face style training
    # augmentation
    augment: bool = True
    aug_rotate_deg: float = 15.0
    aug_scale_lo: float = 0.9
    aug_scale_hi: float = 1.1
    aug_translate_frac: float = 0.05
    aug_mirror_prob: float = 0.5
    # data: either a directory or the synthetic generator
    data_dir: str = ""
    synth_count: int = 100
    synth_height: int = 64
    synth_width: int = 64
    synth_clutter: float = 0.5
    synth_multi_face: bool = False
    holdout_count: int = 0           # trailing samples held out for logging
    # execution
    threads: int = 1
    eval_at_256: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got "
                              f"{self.variant!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.input_size not in (128, 512):
            raise ConfigError(f"input_size must be 128 or 512, got {self.input_size}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.aug_scale_lo > self.aug_scale_hi:
            raise ConfigError("aug_scale_lo must not exceed aug_scale_hi")

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text):
        fields = {f.name: f for f in dataclasses.fields(RunConfig)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got "
                                  f"{raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _coerce(key, value, fields[key].type)
        return RunConfig(**kwargs)

    @staticmethod
    def from_file(path):
        try:
            text = open(path).read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        return RunConfig.from_text(text)

    def with_overrides(self, pairs):
        """Apply 'key=value' strings (CLI --set flags) on top of this config."""
        fields = {f.name: f for f in dataclasses.fields(RunConfig)}
        updates = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, value = (part.strip() for part in pair.split("=", 1))
            if key not in fields:
                raise ConfigError(f"override names unknown key {key!r}")
            updates[key] = _coerce(key, value, fields[key].type)
        return dataclasses.replace(self, **updates)

    def synth_config(self):
        from .data import SynthConfig
        return SynthConfig(seed=self.seed, count=self.synth_count,
                           height=self.synth_height, width=self.synth_width,
                           vocabulary=self.vocabulary, clutter=self.synth_clutter,
                           multi_face=self.synth_multi_face)

    def augment_config(self):
        from .data import AugmentConfig
        from .vocab import MIRROR_SWAP_FINE
        swaps = MIRROR_SWAP_FINE if self.vocabulary == "fine" else ()
        return AugmentConfig(self.aug_rotate_deg, self.aug_scale_lo,
                             self.aug_scale_hi, self.aug_translate_frac,
                             self.aug_mirror_prob, swaps)


def _coerce(key, value, ftype):
    ftype = {int: int, float: float, str: str, bool: bool,
             "int": int, "float": float, "str": str, "bool": bool}[ftype]
    if ftype is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return ftype(value)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
