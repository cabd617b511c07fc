"""Plot emission: a gnuplot script next to each CSV, plus a PNG rendered with matplotlib."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _col(header, name) -> int:
    try:
        return header.index(name) + 1
    except ValueError:
        raise KeyError(f"plot column {name!r} not in table header {header}") from None


def gnuplot_script(csv_name: str, header, plot, groups=(), png_name: str | None = None) -> str:
    """Script plotting ``plot`` from ``csv_name``; ``groups`` lists the values of ``plot.group``."""
    lines = [f"# {plot.title}" if plot.title else "# capax plot",
             'set datafile separator ","',
             'set datafile missing "nan"',
             "set key autotitle columnhead",
             f'set title "{plot.title}"',
             f'set xlabel "{plot.x}"']
    if png_name:
        lines += ["set terminal pngcairo size 800,600", f'set output "{png_name}"']
    if plot.logx:
        lines.append("set logscale x")
    if plot.logy:
        lines.append("set logscale y")
    x = _col(header, plot.x)
    if plot.style == "field":
        x2 = _col(header, "x2")
        v = _col(header, plot.y[0])
        lines += ["set view map", "set size ratio -1",
                  f'splot "{csv_name}" using {x}:{x2}:{v} with points '
                  f'pointtype 5 palette title "{plot.y[0]}"']
        return "\n".join(lines) + "\n"
    parts = []
    for name in plot.y:
        y = _col(header, name)
        if plot.group:
            g = _col(header, plot.group)
            values = " ".join(str(v) for v in groups)
            parts.append(f'for [k in "{values}"] "{csv_name}" using '
                         f'(column({g}) == k+0 ? column({x}) : 1/0):{y} '
                         f'with {plot.style} title sprintf("{name} {plot.group} %s", k)')
        else:
            parts.append(f'"{csv_name}" using {x}:{y} with {plot.style} title "{name}"')
    lines.append("plot " + ", \\\n     ".join(parts))
    return "\n".join(lines) + "\n"


def render_png(path, header, rows, plot) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    data = {h: [r[i] for r in rows] for i, h in enumerate(header)}

    def numeric(name):
        return np.array([float(v) if not isinstance(v, str) else np.nan for v in data[name]])

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    if plot.style == "field":
        sc = ax.scatter(numeric(plot.x), numeric("x2"), c=numeric(plot.y[0]), marker="s", s=12)
        fig.colorbar(sc, ax=ax, label=plot.y[0])
        ax.set_aspect("equal")
    else:
        x = numeric(plot.x)
        marker = "o" if plot.style in ("points", "linespoints") else None
        linestyle = "none" if plot.style == "points" else "-"
        groups = [None] if not plot.group else sorted(set(data[plot.group]))
        for name in plot.y:
            y = numeric(name)
            for g in groups:
                sel = np.ones(len(x), bool) if g is None else np.array(data[plot.group]) == g
                keep = sel & np.isfinite(x) & np.isfinite(y)
                if plot.logx:
                    keep &= x > 0
                if plot.logy:
                    keep &= y > 0
                if not keep.any():
                    continue
                label = name if g is None else f"{name} {plot.group} {g}"
                ax.plot(x[keep], y[keep], marker=marker, linestyle=linestyle, label=label)
        if plot.logx:
            ax.set_xscale("log")
        if plot.logy:
            ax.set_yscale("log")
        if ax.lines and len(ax.lines) <= 12:
            ax.legend(fontsize=8)
    ax.set_xlabel(plot.x)
    ax.set_title(plot.title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
