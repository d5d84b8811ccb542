from __future__ import annotations

from math import pi
from pathlib import Path
from typing import Optional

import pandas as pd
import panel as pn
from bokeh.models import ColorBar, LinearColorMapper
from bokeh.palettes import Cividis256
from bokeh.plotting import figure
from bokeh.resources import INLINE
from bokeh.transform import transform

from mvgrid_edit.definitions import PSNR_CAP
from mvgrid_edit.processing.metrics import BenchmarkReport

pn.extension("tabulator")

PALETTE_CONTINUOUS = Cividis256

HEATMAP_CELL_HEIGHT = 15
HEATMAP_CELL_WIDTH = 40

# fixed color ranges where the metric has one; None means the data's own range
METRIC_RANGES = {
    "psnr": (0.0, PSNR_CAP),
    "preservation_error": None,
    "edit_direction_cosine": (-1.0, 1.0),
}
METRIC_TITLES = {
    "psnr": "PSNR vs. ground truth (dB)",
    "preservation_error": "Preservation error",
    "edit_direction_cosine": "Edit direction cosine (pixel space)",
}


def heatmap(
    df: pd.DataFrame,
    x_col: str,
    y_col: str,
    c_col: str,
    tooltip_cols: Optional[list] = None,
    title: str = "",
    c_min: Optional[float] = None,
    c_max: Optional[float] = None,
    colorbar: bool = True,
    **fig_kwargs,
):
    """
    Make a heatmap from a dataframe

    Parameters
    ----------
    df : pd.DataFrame
        Long-format frame, one row per cell
    x_col : str
        The column to use for the x-axis
    y_col : str
        The column to use for the y-axis
    c_col : str
        The column to use for the color, must be numeric
    tooltip_cols : list
        Columns (or ready-made ``(label, field)`` tuples) to show on hover
    c_min, c_max : float
        Color range; defaults to the range of ``c_col``

    Returns
    -------
    figure
        The heatmap plot
    """
    tooltip_cols = tooltip_cols or [y_col, x_col, c_col]
    tooltips = []
    for col in tooltip_cols:
        if isinstance(col, tuple):
            tooltips.append(col)
        else:
            tooltips.append((col.replace("_", " ").title(), f"@{col}"))

    values = df[c_col].astype(float)
    if values.isna().all():
        values = pd.Series([0.0])
    c_min = values.min() if c_min is None else c_min
    c_max = values.max() if c_max is None else c_max
    if not c_max > c_min:
        c_max = c_min + 1.0

    x_factors = list(dict.fromkeys(df[x_col]))
    y_factors = sorted(df[y_col].unique())
    p = figure(
        frame_width=HEATMAP_CELL_WIDTH * len(x_factors),
        frame_height=HEATMAP_CELL_HEIGHT * len(y_factors),
        x_range=x_factors,
        y_range=y_factors,
        tools="hover",
        toolbar_location=None,
        tooltips=tooltips,
        title=title,
        **fig_kwargs,
    )
    mapper = LinearColorMapper(palette=tuple(reversed(PALETTE_CONTINUOUS)), low=c_min, high=c_max)
    fill_color = transform(c_col, mapper)
    p.rect(x=x_col, y=y_col, width=0.9, height=0.9, source=df, fill_alpha=0.9, color=fill_color)
    if colorbar:
        p.add_layout(ColorBar(color_mapper=mapper, width=8), "right")

    p.title.text_font_size = "8pt"
    p.grid.grid_line_color = None
    p.axis.axis_line_color = None
    p.axis.major_tick_line_color = None
    p.axis.major_label_text_font_size = "12px"
    p.xaxis.major_label_orientation = pi / 2
    return p


def make_report_heatmaps(rows: pd.DataFrame, metrics: Optional[list[str]] = None):
    """One scene x method heatmap per metric."""
    metrics = metrics or list(METRIC_RANGES)
    charts = []
    for metric in metrics:
        c_min, c_max = METRIC_RANGES.get(metric) or (None, None)
        charts.append(
            heatmap(
                rows[["scene_id", "edit_kind", "method", metric]].copy(),
                x_col="method",
                y_col="scene_id",
                c_col=metric,
                tooltip_cols=["scene_id", "edit_kind", "method", metric],
                title=METRIC_TITLES.get(metric, metric),
                c_min=c_min,
                c_max=c_max,
            )
        )
    return charts


def save_report_html(report: BenchmarkReport, path: Path | str, title: str = "Edit propagation benchmark") -> Path:
    """Write the aggregate table and the per-scene heatmaps to one static HTML file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = pn.Column(
        pn.pane.Markdown(f"# {title}"),
        pn.widgets.Tabulator(report.aggregates, disabled=True, show_index=False),
        pn.Row(*make_report_heatmaps(report.rows)),
    )
    layout.save(path, resources=INLINE, title=title)
    return path
