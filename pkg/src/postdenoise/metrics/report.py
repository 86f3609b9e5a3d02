from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class MetricReport:
    """Scores of one (model, dataset, sigma) configuration, stored as ``key = value`` lines."""

    psnr_mean: float
    fid_mean: float
    fid_std: float
    fid_repeats: int
    normality_global: float
    normality_random_patch: float
    normality_top_patch: float
    extractor: str
    seed: int
    config_hash: str
    sigma: float = 0.0
    histogram_files: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fid_repeats < 1:
            raise ValueError("fid_repeats must be >= 1")
        for name in ("normality_global", "normality_random_patch", "normality_top_patch"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0 or v != v):
                raise ValueError(f"{name}={v} is not a rate in [0, 1]")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "extra":
                lines += [f"{k} = {v}" for k, v in value.items()]
            elif isinstance(value, list):
                lines.append(f"{f.name} = {','.join(value)}")
            else:
                lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> MetricReport:
        raw = {}
        for line in Path(path).read_text().splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                raw[k] = v
        kwargs, extra = {}, {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for k, v in raw.items():
            if k not in types:
                extra[k] = v
            elif k == "histogram_files":
                kwargs[k] = [s for s in v.split(",") if s]
            elif types[k] in ("int",):
                kwargs[k] = int(v)
            elif types[k] in ("float",):
                kwargs[k] = float(v)
            else:
                kwargs[k] = v
        return cls(**kwargs, extra=extra)
