"""Report figures for experiment matrices (rendered to files, never shown)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_LABELS = {"gaussian": "Gaussian atoms", "fbp": "FBP + trace", "sart": "SART + trace"}
METHOD_COLORS = {"gaussian": "#c44e52", "fbp": "#4c72b0", "sart": "#55a868"}


def _grouped(rows, metric):
    vals = defaultdict(list)
    for r in rows:
        if r.get(metric, "") == "":
            continue
        vals[(r["scheme"], r["method"])].append(float(r[metric]))
    return vals


def _ordered(rows, key, order):
    seen = []
    for r in rows:
        if r[key] not in seen:
            seen.append(r[key])
    return sorted(seen, key=lambda v: order.index(v) if v in order else len(order))


def bar_panel(ax, rows, metric, schemes, methods, title):
    vals = _grouped(rows, metric)
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(schemes))
    for k, m in enumerate(methods):
        means, lo, hi = [], [], []
        for s in schemes:
            v = vals.get((s, m), [])
            if v:
                means.append(np.mean(v))
                lo.append(np.mean(v) - np.min(v))
                hi.append(np.max(v) - np.mean(v))
            else:
                means.append(np.nan)
                lo.append(0.0)
                hi.append(0.0)
        ax.bar(x + (k - (len(methods) - 1) / 2) * width, means, width, yerr=[lo, hi], capsize=2,
               label=METHOD_LABELS.get(m, m), color=METHOD_COLORS.get(m))
    ax.set_xticks(x)
    ax.set_xticklabels([s.capitalize() if s != "mw" else "MW" for s in schemes])
    ax.set_title(title)
    ax.set_ylim(0, 1.05)


def rates_figure(rows, path):
    from .experiment import METHODS, SCHEME_ORDER

    schemes = _ordered(rows, "scheme", list(SCHEME_ORDER))
    methods = _ordered(rows, "method", list(METHODS))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    bar_panel(axes[0], rows, "tpr", schemes, methods, "True positive rate")
    bar_panel(axes[1], rows, "fpr", schemes, methods, "False positive rate")
    bar_panel(axes[2], rows, "ssim", schemes, methods, "SSIM")
    axes[0].legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def slices_figure(panels, path, title=None):
    """``panels`` is a list of rows, each a list of ``(label, 2D image)``."""
    n_rows = len(panels)
    n_cols = max(len(p) for p in panels)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.2 * n_cols, 2.2 * n_rows), squeeze=False)
    for i, row in enumerate(panels):
        for j in range(n_cols):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j >= len(row):
                ax.axis("off")
                continue
            label, img = row[j]
            ax.imshow(img, cmap="inferno", origin="lower")
            ax.set_title(label, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def central_slice(data: np.ndarray, plane: str = "xz") -> np.ndarray:
    """Central slice of a z-major volume; ``xz`` shows missing-wedge elongation."""
    nz, ny, nx = data.shape
    if plane == "xy":
        return data[nz // 2]
    if plane == "xz":
        return data[:, ny // 2, :]
    return data[:, :, nx // 2]


def experiment_figures(rows, out_dir, cells_dir=None, manifest=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if rows:
        rates_figure(rows, out / "rates.png")
        paths.append(out / "rates.png")
    if cells_dir is not None and manifest is not None:
        from .formats import read_volume

        first_seed = min((c["seed"] for c in manifest["cells"].values()), default=None)
        by_scheme = defaultdict(dict)
        for key, c in manifest["cells"].items():
            if c["seed"] != first_seed:
                continue
            vol = Path(cells_dir) / key / "volume.aetv"
            gt = Path(cells_dir) / key / "gt_volume.aetv"
            if vol.exists():
                by_scheme[c["scheme"]][c["method"]] = read_volume(vol).data
            if gt.exists() and "truth" not in by_scheme[c["scheme"]]:
                by_scheme[c["scheme"]]["truth"] = read_volume(gt).data
        from .experiment import METHODS, SCHEME_ORDER

        panels = []
        for s in sorted(by_scheme, key=lambda v: SCHEME_ORDER.index(v) if v in SCHEME_ORDER else 99):
            row = []
            for m in ("truth",) + METHODS:
                if m in by_scheme[s]:
                    row.append((f"{s}: {METHOD_LABELS.get(m, 'ground truth')}", central_slice(by_scheme[s][m])))
            panels.append(row)
        if panels:
            slices_figure(panels, out / "slices.png", title=f"central x-z slices, seed {first_seed}")
            paths.append(out / "slices.png")
    return paths
