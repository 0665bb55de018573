"""Per-region protrusion densities, width histograms and method comparison."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

from .errors import InputError

log = logging.getLogger(__name__)


@dataclass
class RegionStats:
    region_label: int
    region_name: str
    region_area_cm2: float
    count: int
    count_per_cm2: float
    histogram: list
    bin_edges_um: list

    def to_json(self) -> dict:
        return asdict(self)


def uniform_edges(max_width_um: float, bin_width_um: float) -> np.ndarray:
    """Edges 0, b, 2b, ... with the last edge strictly above ``max_width_um``."""
    if bin_width_um <= 0:
        raise InputError("bin width must be positive")
    n = int(math.floor(max_width_um / bin_width_um)) + 1 if max_width_um > 0 else 1
    return np.arange(n + 1) * float(bin_width_um)


def fine_edges(max_width_um: float, fine_um: float = 50.0, limit_um: float = 300.0,
               coarse_um: float = 100.0) -> np.ndarray:
    """Narrow bins below ``limit_um``, coarse bins from there up past the maximum."""
    low = np.arange(0.0, limit_um, fine_um)
    m = int(math.floor((max_width_um - limit_um) / coarse_um)) + 1 if max_width_um >= limit_um else 0
    return np.concatenate([low, limit_um + coarse_um * np.arange(m + 1)])


def bin_index(widths, edges) -> np.ndarray:
    """Left-closed, right-open bin of each width; a width on an edge goes up."""
    return np.searchsorted(edges, np.asarray(widths, float), side="right") - 1


def compute_stats(pset, partition, pitch_um: float, bin_width_um: float = 100.0,
                  edges=None) -> list[RegionStats]:
    """Counts, density per cm^2 and width histogram for every labelled region.

    Records in the background (label 0) are ignored. Histogram edges are
    shared by all regions so rows are comparable.
    """
    records = getattr(pset, "records", pset)
    widths = np.array([r.equivalent_width_um for r in records], dtype=np.float64)
    labels = np.array([r.region_label for r in records], dtype=np.int64)
    if edges is None:
        edges = uniform_edges(widths.max() if len(widths) else 0.0, bin_width_um)
    edges = np.asarray(edges, dtype=np.float64)
    if len(widths) and widths.max() >= edges[-1]:
        raise InputError(f"width {widths.max():.1f} um beyond last bin edge {edges[-1]}")

    counts = partition.pixel_counts()
    px_cm2 = (pitch_um * 1e-4) ** 2
    out = []
    for label in range(1, partition.k + 1):
        if counts[label] == 0:
            log.warning("region %d has zero area and is excluded", label)
            continue
        area = float(counts[label]) * px_cm2
        sel = widths[labels == label]
        hist = np.bincount(bin_index(sel, edges), minlength=len(edges) - 1)[: len(edges) - 1]
        out.append(RegionStats(
            region_label=label,
            region_name=partition.region_names[label - 1],
            region_area_cm2=area,
            count=int(len(sel)),
            count_per_cm2=len(sel) / area,
            histogram=[int(v) for v in hist],
            bin_edges_um=[float(e) for e in edges],
        ))
    return out


def rank_correlation(a, b) -> float | None:
    """Spearman correlation; identical rankings give 1 even when tied throughout."""
    ra, rb = sps.rankdata(a), sps.rankdata(b)
    if np.array_equal(ra, rb):
        return 1.0
    if np.ptp(ra) == 0 or np.ptp(rb) == 0 or len(ra) < 2:
        return None
    return float(np.corrcoef(ra, rb)[0, 1])


def compare_methods(a: list[RegionStats], b: list[RegionStats]) -> dict:
    """Row per region with both densities and their ratio b/a."""
    la = [s.region_label for s in a]
    lb = [s.region_label for s in b]
    if la != lb:
        raise InputError(f"partition mismatch: regions {la} vs {lb}")
    rows = []
    for sa, sb in zip(a, b):
        da, db = sa.count_per_cm2, sb.count_per_cm2
        if da > 0:
            ratio = db / da
        else:
            ratio = 1.0 if db == 0 else None
        rows.append({"region_label": sa.region_label, "region_name": sa.region_name,
                     "density_a": da, "density_b": db, "ratio": ratio})
    rho = rank_correlation([s.count_per_cm2 for s in a], [s.count_per_cm2 for s in b])
    return {"rows": rows, "rank_correlation": rho}


def write_histogram_csv(stats: list[RegionStats], path) -> None:
    with open(path, "w") as fh:
        fh.write("region,name,bin_lo_um,bin_hi_um,count,count_per_cm2\n")
        for s in stats:
            for lo, hi, c in zip(s.bin_edges_um[:-1], s.bin_edges_um[1:], s.histogram):
                fh.write(f"{s.region_label},{s.region_name},{lo:g},{hi:g},{c},{c / s.region_area_cm2:.6f}\n")


def write_histogram_svg(stats: list[RegionStats], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "paintps"
    fig, ax = plt.subplots(figsize=(8, 4))
    if stats:
        edges = np.asarray(stats[0].bin_edges_um)
        centers = 0.5 * (edges[:-1] + edges[1:])
        width = np.diff(edges) / (len(stats) + 1)
        for i, s in enumerate(stats):
            dens = np.asarray(s.histogram) / s.region_area_cm2
            ax.bar(edges[:-1] + (i + 0.5) * width, dens, width=width, align="edge", label=s.region_name)
        ax.set_xticks(centers)
        ax.set_xticklabels([f"{lo:g}-{hi:g}" for lo, hi in zip(edges[:-1], edges[1:])], rotation=45)
        ax.legend(fontsize="small")
    ax.set_xlabel("protrusion width (µm)")
    ax.set_ylabel("protrusions / cm²")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
