"""NFE sweeps: sample each model at several step counts from matched noise."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .metrics import METRICS
from .sampler import initial_noise, make_step_schedule, sample_from

_CSV_FIELDS = ("method", "nfe", "metric", "wall_time_per_step")


@dataclass
class SweepRow:
    method: str
    nfe: int
    metric: float
    wall_time_per_step: float


@dataclass
class NfeSweepReport:
    metric_kind: str
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric_kind",) + _CSV_FIELDS)
        for r in self.rows:
            w.writerow((self.metric_kind, r.method, r.nfe, repr(r.metric), repr(r.wall_time_per_step)))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "NfeSweepReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        kinds = {r["metric_kind"] for r in rows}
        if len(kinds) > 1:
            raise ValueError(f"mixed metric kinds in one report: {sorted(kinds)}")
        report = cls(kinds.pop() if kinds else "")
        for r in rows:
            report.rows.append(SweepRow(r["method"], int(r["nfe"]), float(r["metric"]),
                                        float(r["wall_time_per_step"])))
        return report

    def to_text(self) -> str:
        label = self.metric_kind + (" (proxy, not Inception FID)" if self.metric_kind == "fid_proxy" else "")
        head = ("method", "NFE", label, "ms/step")
        body = [(r.method, str(r.nfe), f"{r.metric:.6f}", f"{1e3 * r.wall_time_per_step:.3f}") for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in [head] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def values(self, method: str) -> dict[int, float]:
        return {r.nfe: r.metric for r in self.rows if r.method == method}

    def plot(self, path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method in dict.fromkeys(r.method for r in self.rows):
            vals = sorted(self.values(method).items())
            ax.plot([v[0] for v in vals], [v[1] for v in vals], marker="o", label=method)
        ax.set_xscale("log")
        ax.set_xlabel("NFE")
        ax.set_ylabel(self.metric_kind)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
        plt.close(fig)


def generate_sweep_samples(model, s, nfe: int, n: int, dim: int, seed: int, dtype, strategy="uniform"):
    """Samples plus elapsed seconds for one (model, nfe) cell."""
    path = make_step_schedule(s.T, nfe, strategy)
    x = initial_noise((n, dim), seed, dtype or torch.float32)
    counter = [0]
    start = time.perf_counter()
    out = sample_from(model, s, path, x, counter=counter)
    elapsed = time.perf_counter() - start
    if counter[0] != nfe:
        raise AssertionError(f"expected {nfe} evaluations, made {counter[0]}")
    return out.detach().cpu().numpy().astype(np.float64), elapsed


def nfe_sweep(models, nfe_list, reference: np.ndarray, metric_kind: str = "sliced_wasserstein",
              n_samples: int = 2000, seed: int = 0, metric_kwargs=None, strategy: str = "uniform",
              on_samples=None) -> NfeSweepReport:
    """``models`` maps a method label to ``(model, schedule)``.

    Every cell starts from the same initial noise (``seed``). ``on_samples``
    receives ``(label, nfe, samples)`` before the metric is computed.
    """
    if metric_kind not in METRICS:
        raise ValueError(f"unknown metric {metric_kind!r}")
    metric = METRICS[metric_kind]
    kwargs = dict(metric_kwargs or {})
    report = NfeSweepReport(metric_kind)
    dim = reference.shape[1]
    for label, (model, s) in models.items():
        dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else None
        for nfe in nfe_list:
            x, elapsed = generate_sweep_samples(model, s, int(nfe), n_samples, dim, seed, dtype, strategy)
            if on_samples is not None:
                on_samples(label, int(nfe), x)
            report.rows.append(SweepRow(label, int(nfe), float(metric(x, reference, **kwargs)), elapsed / nfe))
    return report
