"""Metrics reports, comparison tables and static plots."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InvalidInput, MissingArtifact, ParseError  # noqa: E402

METRIC_KEYS = ("game0", "game1", "game2", "game3", "mae", "rmse")
REPORT_JSON = "report.json"


@dataclass
class MetricsReport:
    """Everything one training or evaluation run produced, keyed by a content-derived run id."""

    run_id: str
    config_hash: str
    splits: dict[str, dict]
    epoch_losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def check(self, tol: float = 1e-9) -> None:
        """Raise if a split violates ``GAME(0) == MAE`` or monotonicity of GAME in the level."""
        for name, m in self.splits.items():
            if abs(m["game0"] - m["mae"]) > tol:
                raise InvalidInput(f"{self.run_id}/{name}: GAME(0) {m['game0']} != MAE {m['mae']}")
            for lv in range(3):
                if m[f"game{lv + 1}"] < m[f"game{lv}"] - tol:
                    raise InvalidInput(f"{self.run_id}/{name}: GAME({lv + 1}) < GAME({lv})")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, source: str = "<report>") -> "MetricsReport":
        try:
            return cls(**json.loads(text))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ParseError(f"{source}: not a metrics report ({exc})") from exc


def format_table(rows: list[dict], columns: list[str], title: str | None = None) -> str:
    """Fixed-width text table; floats get three decimals."""
    def cell(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.3f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [title, ""] if title else []
    out += [line, "-" * len(line)]
    out += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(out) + "\n"


def write_csv(rows: list[dict], columns: list[str], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def plot_curves(curves: dict[str, list[float]], path, xlabel: str, ylabel: str,
                logy: bool = False, xs: dict[str, list[float]] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in curves.items():
        x = (xs or {}).get(label, range(1, len(ys) + 1))
        ax.plot(list(x), ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    if len(curves) > 1:
        ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def write_report(report: MetricsReport, out) -> None:
    """``report.json``, ``metrics.csv`` (one row per evaluation), ``report.txt`` and plots."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report.check()
    (out / REPORT_JSON).write_text(report.to_json(), encoding="utf-8")
    eval_cols = ["epoch", "step", "train_loss", *METRIC_KEYS]
    write_csv(report.evals, eval_cols, out / "metrics.csv")
    rows = [{"split": name, **m} for name, m in report.splits.items()]
    text = format_table(rows, ["split", *METRIC_KEYS], f"run {report.run_id}  config {report.config_hash}")
    text += f"\nwall clock {report.wall_clock:.1f} s\n"
    if "best" in report.extra:
        b = report.extra["best"]
        text += f"best test GAME(0) {b['game0']:.3f} at epoch {b['epoch']}\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    if report.epoch_losses:
        plot_curves({"total loss": report.epoch_losses}, out / "loss.png", "epoch", "training loss", logy=True)
    if report.evals:
        plot_curves({k: [e[k] for e in report.evals] for k in ("game0", "game3", "rmse")}, out / "test_metrics.png",
                    "epoch", "test error", xs={k: [e["epoch"] for e in report.evals] for k in ("game0", "game3", "rmse")})


def load_report(run_dir) -> MetricsReport:
    path = Path(run_dir) / REPORT_JSON
    if not path.is_file():
        raise MissingArtifact(f"no {REPORT_JSON} in {run_dir}")
    return MetricsReport.from_json(path.read_text(encoding="utf-8"), str(path))


def aggregate_reports(run_dirs, out) -> list[dict]:
    """Merge several run reports into one comparison table (text and CSV) plus plots."""
    if not run_dirs:
        raise InvalidInput("report needs at least one run directory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, losses = [], {}
    for d in run_dirs:
        r = load_report(d)
        r.check()
        for split, m in r.splits.items():
            rows.append({"run": Path(d).name, "run_id": r.run_id, "split": split,
                         **{k: m[k] for k in METRIC_KEYS}})
        if r.epoch_losses:
            losses[Path(d).name] = r.epoch_losses
    cols = ["run", "run_id", "split", *METRIC_KEYS]
    (out / "comparison.txt").write_text(format_table(rows, cols, "run comparison"), encoding="utf-8")
    write_csv(rows, cols, out / "comparison.csv")
    if losses:
        plot_curves(losses, out / "losses.png", "epoch", "training loss", logy=True)
    return rows
