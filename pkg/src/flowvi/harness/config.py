"""Flat YAML run configuration, presets and FLOWVI_ environment overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from flowvi.errors import ConfigError
from flowvi.flows import KINDS
from flowvi.harness.data import SyntheticConfig
from flowvi.model import GATE_INITS, ModelConfig
from flowvi.trainer import STRATEGIES, TrainConfig, epochs_to_steps

ENV_PREFIX = "FLOWVI_"


@dataclass
class RunConfig:
    """Every knob of a run. Keys are flat; see ``describe()`` for meanings."""

    name: str = "run"
    preset: str = ""
    out_dir: str = "runs"
    seed: int = 0
    # data
    train_path: str = ""          # empty: synthetic corpus
    val_path: str = ""
    test_path: str = ""
    vocab_path: str = ""          # empty: built from the training data
    vocab_max_size: int = 5000
    data_seed: int = 0
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    synth_vocab_size: int = 200
    doc_max_len: int = 64
    summary_max_len: int = 16
    max_src: int = 64
    max_tgt: int = 16
    # model
    d_model: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    d_ff: int = 256
    dropout: float = 0.1
    latent_dim: int = 16
    flow: str = "rqnsf"
    n_flows: int = 4
    spline_bins: int = 4
    spline_bound: float = 3.0
    infer_hidden: int = 300
    infer_layers: int = 3
    infer_dropout: float = 0.1
    gate_init: str = "standard"
    # training
    backbone_steps: int = 0       # plain encoder-decoder warm start before the latent joins
    backbone_lr: float = 2e-3
    strategy: str = "caat"
    beta: float = 1.0
    C: float = 0.1
    n_max: int = 0                # steps; 0 means derive from epochs
    n_agg: int = 0
    epochs: float = 3.0
    agg_epochs: float = 1.0       # CAAT aggressive stage length in epochs
    n_alt: int = 15
    lr: float = 5e-5
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 8
    eval_interval: int = 50
    patience: int = 8
    collapse_window: int = 50
    collapse_threshold: float = 0.02
    # evaluation
    beam_size: int = 4
    length_penalty: float = 2.0
    decode_max_len: int = 16
    rep_window: int = 16
    n_decode: int = 0             # decode only the first n test docs; 0 = all
    n_latent_samples: int = 0     # latents dumped per test doc after training
    scale_note: str = ""

    # --- derived views ---
    def steps(self) -> tuple[int, int]:
        """(n_max, n_agg) with epoch counts converted when steps are unset."""
        n_max = self.n_max or epochs_to_steps(self.epochs, self.n_train_examples(), self.batch_size)
        if self.strategy != "caat":
            return n_max, 0
        n_agg = self.n_agg or epochs_to_steps(self.agg_epochs, self.n_train_examples(), self.batch_size)
        return n_max, min(n_agg, n_max)

    def n_train_examples(self) -> int:
        if not self.train_path:
            return self.n_train
        with open(self.train_path, encoding="utf-8") as fh:
            return sum(1 for line in fh if line.strip())

    def train_config(self) -> TrainConfig:
        n_max, n_agg = self.steps()
        return TrainConfig(strategy=self.strategy, beta=self.beta, C=self.C, n_agg=n_agg,
                           n_alt=self.n_alt, n_max=n_max, lr=self.lr, warmup_frac=self.warmup_frac,
                           clip_norm=self.clip_norm, eval_interval=self.eval_interval,
                           patience=self.patience, seed=self.seed, batch_size=self.batch_size,
                           collapse_window=self.collapse_window,
                           collapse_threshold=self.collapse_threshold).validate()

    def model_config(self, vocab_size: int) -> ModelConfig:
        opts = {}
        if self.flow in ("rqnsf", "rlnsf"):
            opts = {"bins": self.spline_bins, "bound": self.spline_bound}
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                           n_enc=self.n_enc, n_dec=self.n_dec, d_ff=self.d_ff, dropout=self.dropout,
                           latent_dim=self.latent_dim, flow=self.flow, n_flows=self.n_flows,
                           flow_opts=opts, infer_hidden=self.infer_hidden,
                           infer_layers=self.infer_layers, infer_dropout=self.infer_dropout,
                           gate_init=self.gate_init)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(vocab_size=self.synth_vocab_size, doc_max_len=self.doc_max_len,
                               summary_max_len=self.summary_max_len, n_train=self.n_train,
                               n_val=self.n_val, n_test=self.n_test)

    def validate(self) -> "RunConfig":
        if self.flow not in KINDS:
            raise ConfigError(f"flow must be one of {KINDS}, got {self.flow!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.gate_init not in GATE_INITS:
            raise ConfigError(f"gate_init must be one of {GATE_INITS}, got {self.gate_init!r}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        for key in ("n_flows", "n_max", "n_agg", "n_decode", "n_latent_samples", "backbone_steps"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("latent_dim", "d_model", "beam_size", "decode_max_len", "rep_window", "max_src", "max_tgt"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.backbone_lr < 0:
            raise ConfigError("backbone_lr must be >= 0")
        if not self.train_path and (self.val_path or self.test_path):
            raise ConfigError("val_path/test_path given without train_path")
        self.train_config()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml(), encoding="utf-8")


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _coerce(key: str, value: Any) -> Any:
    kind = FIELD_TYPES[key]
    if kind == "str":
        if value is None:
            return ""
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}")
    if kind == "int":
        if float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _apply(base: dict, updates: Mapping[str, Any], origin: str) -> dict:
    unknown = sorted(set(updates) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"{origin}: unknown key(s) {unknown}")
    out = dict(base)
    for k, v in updates.items():
        out[k] = _coerce(k, v)
    return out


def env_overrides(environ: Mapping[str, str]) -> dict:
    """``FLOWVI_LR=1e-3`` style overrides, values parsed as YAML scalars."""
    out = {}
    for var, raw in environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        key = var[len(ENV_PREFIX):].lower()
        if key == "c":
            key = "C"
        try:
            out[key] = yaml.safe_load(raw) if FIELD_TYPES.get(key) != "str" else raw
        except yaml.YAMLError as exc:
            raise ConfigError(f"{var}: cannot parse {raw!r}: {exc}") from None
    return out


def build_config(values: Mapping[str, Any], environ: Mapping[str, str] | None = None,
                 origin: str = "config") -> RunConfig:
    """Defaults, then the named preset, then ``values``, then environment."""
    merged = asdict(RunConfig())
    preset = values.get("preset") or ""
    env = env_overrides(environ) if environ is not None else {}
    preset = env.get("preset", preset)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"{origin}: unknown preset {preset!r}; known: {sorted(PRESETS)}")
        merged = _apply(merged, PRESETS[preset], f"preset {preset}")
    merged = _apply(merged, values, origin)
    merged = _apply(merged, env, "environment")
    return RunConfig(**merged).validate()


def load_config(path, environ: Mapping[str, str] | None = None) -> RunConfig:
    """Parse a flat YAML mapping. ``environ`` defaults to ``os.environ``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        values = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a key-value mapping")
    nested = [k for k, v in values.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigError(f"{path}: config is flat; nested values under {nested}")
    return build_config(values, os.environ if environ is None else environ, str(path))


# --- presets ----------------------------------------------------------------

_DESK = ("desk scale: d_model 64 vs pretrained backbones, latent_dim 16 vs 300, "
         "synthetic 1000-doc corpus, lr 1e-3 vs 5e-5 (fewer, noisier steps)")

# Collapse comparison protocol: a 1500-step plain encoder-decoder warm start
# stands in for the pretrained backbone, then 500 strategy steps (1/3 aggressive
# under CAAT). Both arms of a comparison share seed, data and backbone.
_COLLAPSE = dict(n_flows=4, backbone_steps=1500, backbone_lr=2e-3, lr=2e-3, n_max=500, n_agg=167,
                 n_alt=15, eval_interval=50)
_COLLAPSE_NOTE = (_DESK + "; backbone warm start 1500 steps replaces the pretrained checkpoint, "
                  "strategy stage 500 steps at lr 2e-3")

PRESETS: dict[str, dict] = {
    # reference FlowSUM schedule: RQNSF-4, 1/3 CAAT, batch 8, beam 4, length penalty 2.0
    "flowsum": dict(flow="rqnsf", n_flows=4, strategy="caat", epochs=3.0, agg_epochs=1.0,
                    n_alt=15, batch_size=8, lr=1e-3, beam_size=4, length_penalty=2.0,
                    infer_hidden=300, scale_note=_DESK),
    "vedsum": dict(flow="planar", n_flows=0, strategy="standard", epochs=3.0, lr=1e-3,
                   scale_note=_DESK + "; K=0 degenerate VED baseline"),
    "table7-planar-standard": dict(_COLLAPSE, flow="planar", strategy="standard",
                                   scale_note=_COLLAPSE_NOTE + "; reference uses inference hidden 600"),
    "table7-planar-beta_c": dict(_COLLAPSE, flow="planar", strategy="beta_c", beta=1.0, C=0.1,
                                 scale_note=_COLLAPSE_NOTE),
    "table7-rqnsf-standard": dict(_COLLAPSE, flow="rqnsf", strategy="standard", scale_note=_COLLAPSE_NOTE),
    "table7-rqnsf-caat": dict(_COLLAPSE, flow="rqnsf", strategy="caat", scale_note=_COLLAPSE_NOTE),
    "table7-iaf-caat": dict(_COLLAPSE, flow="iaf", n_flows=6, strategy="caat", scale_note=_COLLAPSE_NOTE),
    "gate-near-zero": dict(flow="rqnsf", n_flows=4, strategy="caat", gate_init="near_zero",
                           epochs=3.0, agg_epochs=1.0, lr=1e-3, scale_note=_DESK),
    "smoke": dict(flow="rqnsf", n_flows=2, strategy="caat", n_train=64, n_val=16, n_test=8,
                  n_max=30, n_agg=15, n_alt=5, eval_interval=10, d_model=32, d_ff=64,
                  infer_hidden=32, latent_dim=4, lr=1e-3, beam_size=2, decode_max_len=8,
                  backbone_steps=10, scale_note="seconds-long pipeline check, not a reproduction"),
}


def describe() -> str:
    return "\n".join(f"{f.name}: {f.type} = {f.default!r}" for f in fields(RunConfig))
