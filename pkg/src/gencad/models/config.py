"""Hyperparameters for every stage and their flat ``key = value`` file format.

One setting per line, ``section.key = value``, ``#`` starts a comment.
Values are parsed as int, float, bool (true/false) or left as strings.
Unknown keys are an error so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

# (section.key, paper value) printed as comments by dump_config
PAPER_VALUES = {
    "csr.d_z": "256",
    "csr.enc_layers": "4",
    "csr.dec_layers": "4",
    "csr.heads": "8",
    "csr.ffn_dim": "512",
    "csr.dropout": "0.1",
    "csr.lr": "1e-3",
    "csr.batch_size": "512",
    "csr.warmup_steps": "2000",
    "csr.grad_clip": "1.0",
    "csr.beta": "not given",
    "csr.steps": "1000 epochs",
    "ccip.widths": "64,128,256,512",
    "ccip.epochs": "300 (main text) / 500 (appendix)",
    "ccip.tau": "not given",
    "ccip.batch_size": "256",
    "ccip.lr": "1e-3",
    "ccip.image_size": "256 (encoder output 512x8x8)",
    "cdp.timesteps": "500",
    "cdp.blocks": "10",
    "cdp.width": "2048",
    "cdp.dropout": "0.1",
    "cdp.lr": "1e-5",
    "cdp.steps": "1000000",
    "cdp.batch_size": "2048",
    "cdp.grad_accum": "2",
    "cdp.grad_clip": "1.0",
    "data.train_frac": "152530 of 168674",
    "data.val_frac": "8515 of 168674",
}


@dataclass
class CsrConfig:
    d_z: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 8
    ffn_dim: int = 512
    dropout: float = 0.1
    param_embed: int = 16
    n: int = 60
    beta: float = 2.0
    lr: float = 1e-3
    batch_size: int = 64
    warmup_steps: int = 2000
    grad_clip: float = 1.0
    steps: int = 5000
    seed: int = 0


@dataclass
class CcipConfig:
    d_z: int = 64
    widths: str = "8,16,32,64"
    dropout: float = 0.1
    image_size: int = 256
    tau: float = 0.07
    learn_tau: bool = False
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 1e-2
    epochs: int = 300
    plateau_patience: int = 10
    seed: int = 0

    @property
    def width_list(self):
        return [int(w) for w in str(self.widths).split(",")]


@dataclass
class CdpConfig:
    d_z: int = 64
    cond_dim: int = 64
    conditional: bool = True
    timesteps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    blocks: int = 4
    width: int = 128
    dropout: float = 0.1
    time_dim: int = 64
    predict: str = "eps"
    lr: float = 1e-3
    batch_size: int = 128
    grad_accum: int = 2
    grad_clip: float = 1.0
    steps: int = 4000
    seed: int = 0


@dataclass
class PriorConfig:
    d_z: int = 64
    cond_dim: int = 64
    blocks: int = 4
    width: int = 128
    dropout: float = 0.0
    lr: float = 1e-3
    steps: int = 2000
    seed: int = 0


@dataclass
class DataConfig:
    n: int = 200
    seed: int = 0
    train_frac: float = 0.9043
    val_frac: float = 0.0505
    render_size: int = 448


@dataclass
class EvalConfig:
    eta: int = 3
    n_points: int = 2000
    jsd_grid: int = 28
    ref_size: int = 1000
    gen_size: int = 3000
    repeats: int = 3
    seed: int = 0


@dataclass
class GenCadConfig:
    seed: int = 0
    csr: CsrConfig = field(default_factory=CsrConfig)
    ccip: CcipConfig = field(default_factory=CcipConfig)
    cdp: CdpConfig = field(default_factory=CdpConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("csr", "ccip", "cdp", "prior", "data", "eval")

    def set(self, key, raw):
        if "." not in key:
            if key != "seed":
                raise KeyError(f"unknown config key {key!r}")
            self.seed = int(raw)
            return
        section, name = key.split(".", 1)
        if section not in self.SECTIONS:
            raise KeyError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise KeyError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(raw, fields[name].type))

    def flat(self):
        out = {"seed": self.seed}
        for s in self.SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, s)).items():
                out[f"{s}.{k}"] = v
        return out


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def parse_config(text):
    cfg = GenCadConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            cfg.set(key, val)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return cfg


def load_config(path=None):
    if path is None:
        return GenCadConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    lines = ["# gencad configuration (desk-scale defaults; paper values in comments)"]
    for key, val in cfg.flat().items():
        if isinstance(val, bool):
            val = "true" if val else "false"
        line = f"{key} = {val}"
        if key in PAPER_VALUES:
            line = f"{line:<32}# paper: {PAPER_VALUES[key]}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def section_from_dict(cls, d):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})
