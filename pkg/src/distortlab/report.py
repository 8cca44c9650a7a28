"""Delimited outputs and figure rendering.

Every writer goes through an atomic temp-file-and-rename so partially
written results never land under the final name.  Figures are rendered
with matplotlib to self-contained SVG (text stored as paths).
"""

from __future__ import annotations

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

plt.rcParams["svg.fonttype"] = "path"   # embed glyphs: no external assets
plt.rcParams["svg.hashsalt"] = "distortlab"   # deterministic element ids


def write_text_atomic(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, f".{os.path.basename(path)}.{os.getpid()}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def records_jsonl(records, model) -> str:
    return "".join(r.to_json(model) + "\n" for r in records)


def sequence_distribution_csv(dist, model) -> str:
    """completion_ids, completion_text, prob, log_p; descending prob."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["completion_ids", "completion_text", "prob", "log_p"])
    for ids, prob in dist.sorted_items():
        writer.writerow([
            " ".join(str(i) for i in ids),
            model.decode(ids),
            repr(prob),
            repr(dist.log_p[ids]),
        ])
    return buf.getvalue()


def quantile_table_csv(table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["decoder", "level", "value"])
    for level, value in zip(table.levels, table.values):
        writer.writerow([table.decoder, repr(level), repr(value)])
    return buf.getvalue()


def qd_points_csv(points, per_token_length=None) -> str:
    """Sweep table; pass the completion length to add per-token columns."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    header = ["decoder_kind", "param", "mode", "entropy", "entropy_stderr",
              "nll", "nll_stderr", "n", "exact"]
    if per_token_length:
        header += ["entropy_per_token", "nll_per_token"]
    writer.writerow(header)
    for p in points:
        row = [
            p.decoder.kind,
            "" if p.decoder.param is None else repr(p.decoder.param),
            p.decoder.mode,
            repr(p.entropy),
            "" if p.entropy_stderr is None else repr(p.entropy_stderr),
            repr(p.nll),
            "" if p.nll_stderr is None else repr(p.nll_stderr),
            p.n_samples,
            p.exact,
        ]
        if per_token_length:
            row += [repr(p.entropy / per_token_length),
                    repr(p.nll / per_token_length)]
        writer.writerow(row)
    return buf.getvalue()


def _save(fig, path):
    directory = os.path.dirname(os.fspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, f".{os.path.basename(path)}.{os.getpid()}.tmp")
    # strip the creation timestamp so identical inputs give identical bytes
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)


def plot_qd_scatter(points, path) -> None:
    """Entropy vs mean NLL, one series per (kind, mode)."""
    fig, ax = plt.subplots(figsize=(7, 5))
    series = {}
    for p in points:
        series.setdefault((p.decoder.kind, p.decoder.mode), []).append(p)
    for (kind, mode), pts in sorted(series.items()):
        pts = sorted(pts, key=lambda p: p.decoder.param or 0)
        xs = [p.entropy for p in pts]
        ys = [p.nll for p in pts]
        marker = "o" if mode == "local" else "s"
        ax.plot(xs, ys, marker=marker, linestyle="-", markersize=5,
                alpha=0.85, label=f"{kind}@{mode}")
    ax.set_xlabel("entropy (nats per completion)")
    ax.set_ylabel("mean negative log-likelihood (nats)")
    ax.set_title("quality vs diversity")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_lnd_cdf(records_by_label: dict, path) -> None:
    """Empirical CDFs of |log distortion ratio| for each decoder."""
    fig, ax = plt.subplots(figsize=(7, 5))
    for label, records in records_by_label.items():
        values = np.sort(np.abs([r.log_ratio for r in records]))
        cdf = np.arange(1, len(values) + 1) / len(values)
        ax.step(values, cdf, where="post", label=label)
    ax.set_xlabel("|log distortion ratio|")
    ax.set_ylabel("empirical CDF")
    ax.set_title("local normalization distortion ratios")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    ax.set_ylim(0, 1.02)
    _save(fig, path)
