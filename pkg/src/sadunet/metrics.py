"""Projection-based SDR / SIR / SAR.

Each estimate is split by least-squares projection onto the reference
signals: the part along its own reference is the target, the rest of the
projection onto both references is interference, and the residual is
artifacts.  Projections are global (no distortion filters), which makes every
ratio invariant to rescaling the estimate.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import AudioClip
from .tensor import ContractError, ShapeError

CAP_DB = 100.0
SOURCES = ("voice", "accompaniment")


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64).reshape(-1)


def decompose(estimate, references, target: int):
    """Return (s_target, e_interf, e_artif), which sum exactly to ``estimate``."""
    e = _samples(estimate)
    R = np.stack([_samples(r) for r in references])
    if R.shape[1] != e.size:
        raise ShapeError(f"estimate has {e.size} samples, references have {R.shape[1]}")
    energy = np.einsum("ij,ij->i", R, R)
    if np.any(energy == 0):
        raise ContractError("reference with zero energy")
    G = R @ R.T
    if np.linalg.cond(G) > 1e12:
        raise ContractError("references are (nearly) linearly dependent")
    r = R[target]
    s_target = (np.dot(e, r) / energy[target]) * r
    p_all = R.T @ np.linalg.solve(G, R @ e)
    return s_target, p_all - s_target, e - p_all


def _ratio_db(num: float, den: float) -> float:
    if den <= 0:
        return CAP_DB if num > 0 else -CAP_DB
    if num <= 0:
        return -CAP_DB
    return float(np.clip(10 * np.log10(num / den), -CAP_DB, CAP_DB))


def sdr_sir_sar(decomposition) -> tuple[float, float, float]:
    s, ei, ea = decomposition
    e2 = lambda x: float(np.dot(x, x))  # noqa: E731
    sdr = _ratio_db(e2(s), e2(ei + ea))
    sir = _ratio_db(e2(s), e2(ei))
    sar = _ratio_db(e2(s + ei), e2(ea))
    return sdr, sir, sar


@dataclass
class SourceMetrics:
    source: str
    sdr: float
    sir: float
    sar: float


@dataclass
class EvalReport:
    track: str
    length: int
    sources: list[SourceMetrics] = field(default_factory=list)

    def by_source(self, name: str) -> SourceMetrics:
        return next(s for s in self.sources if s.source == name)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["track", "source", "sdr", "sir", "sar"])
        for s in self.sources:
            w.writerow([self.track, s.source, f"{s.sdr:.4f}", f"{s.sir:.4f}", f"{s.sar:.4f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self) -> str:
        lines = [f"{'track':<20s} {'source':<14s} {'SDR':>9s} {'SIR':>9s} {'SAR':>9s}"]
        for s in self.sources:
            lines.append(f"{self.track:<20s} {s.source:<14s} {s.sdr:9.3f} {s.sir:9.3f} {s.sar:9.3f}")
        return "\n".join(lines)


def evaluate_track(estimates, references, name: str = "track") -> EvalReport:
    """Metrics for (voice, accompaniment) estimates against (voice, accompaniment) references."""
    est = [_samples(x) for x in estimates]
    ref = [_samples(x) for x in references]
    lengths = {x.size for x in est + ref}
    if len(lengths) != 1:
        raise ShapeError(f"clips differ in length: {sorted(lengths)}")
    report = EvalReport(name, lengths.pop())
    for j, src in enumerate(SOURCES):
        sdr, sir, sar = sdr_sir_sar(decompose(est[j], ref, j))
        report.sources.append(SourceMetrics(src, sdr, sir, sar))
    return report
