"""Reference label tables for Salinas and YRE, and a synthetic benchmark scene."""
from __future__ import annotations

import numpy as np

from .data import GroundTruth, HsiCube

# (name, training pixels, testing pixels) per class, in class-id order
SALINAS_CLASSES = [
    ("Brocoli green weeds 1", 5, 2004),
    ("Brocoli green weeds 2", 5, 3721),
    ("Fallow", 5, 1971),
    ("Fallow rough plow", 5, 1389),
    ("Fallow smooth", 5, 2673),
    ("Stubble", 5, 3954),
    ("Celery", 5, 3574),
    ("Grapes untrained", 5, 11266),
    ("Soil vinyard develop", 5, 6198),
    ("Corn senesced green weeds", 5, 3273),
    ("Lettuce romaine 4wk", 5, 1063),
    ("Lettuce romaine 5wk", 5, 1922),
    ("Lettuce romaine 6wk", 5, 911),
    ("Lettuce romaine 7wk", 5, 1065),
    ("Vinyard untrained", 5, 7263),
    ("Vinyard vertical trellis", 5, 1802),
]
SALINAS_SHAPE = (512, 217, 204)
SALINAS_TABLE_TOTAL = (80, 54129)

YRE_CLASSES = [
    ("Building", 10, 523),
    ("River", 10, 5366),
    ("Salt Marsh", 10, 4985),
    ("Shallow Sea", 10, 17540),
    ("Deep Sea", 10, 18667),
    ("Intertidal Saltwater Marsh", 10, 2333),
    ("Tidal Flat", 10, 1782),
    ("Pond", 10, 1777),
    ("Sorghum", 10, 636),
    ("Corn", 10, 1499),
    ("Lotus Root", 10, 2709),
    ("Aquaculture", 10, 8009),
    ("Rice", 10, 5498),
    ("Tamarix Chinensis", 10, 1210),
    ("Freshwater Herbaceous Marsh", 10, 1407),
    ("Suaeda Salsa", 10, 864),
    ("Spartina Alterniflora", 10, 570),
    ("Reed", 10, 1960),
    ("Floodplain", 10, 337),
    ("Locus", 10, 65),
]
YRE_SHAPE = (1400, 1400, 180)
YRE_TABLE_TOTAL = (200, 77737)

# published MCT results with pretraining (OA, AA, kappa in percent)
PUBLISHED = {
    "salinas": {"oa": 92.04, "aa": 96.26, "kappa": 91.13},
    "yre": {"oa": 90.72, "aa": 85.98, "kappa": 89.26},
}

REFERENCE = {
    "salinas": (SALINAS_CLASSES, SALINAS_SHAPE),
    "yre": (YRE_CLASSES, YRE_SHAPE),
}


def reference_gt(name: str, seed: int = 0) -> GroundTruth:
    """Ground-truth map with the published per-class label counts at random positions.

    Stands in for the real label map where only the split arithmetic matters.
    """
    classes, (h, w, _) = REFERENCE[name]
    counts = [train + test for _, train, test in classes]
    rng = np.random.default_rng(seed)
    flat = np.zeros(h * w, dtype=np.uint16)
    order = rng.permutation(h * w)
    start = 0
    for cid, n in enumerate(counts, start=1):
        flat[order[start:start + n]] = cid
        start += n
    return GroundTruth(flat.reshape(h, w), [c[0] for c in classes])


def synthetic_scene(height: int = 64, width: int = 64, bands: int = 16, n_classes: int = 2,
                    seed: int = 0, noise: float = 0.05, separation: float = 1.0,
                    n_regions: int | None = None) -> tuple[HsiCube, GroundTruth]:
    """Piecewise-constant scene of smooth class spectra plus noise.

    Classes occupy Voronoi cells of random sites, so labels are spatially
    coherent. ``separation`` scales the distance between class spectra.
    """
    rng = np.random.default_rng(seed)
    n_regions = n_regions or 3 * n_classes
    sites = rng.uniform(0, 1, size=(n_regions, 2)) * (height, width)
    site_class = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n_regions - n_classes)])
    rr, cc = np.mgrid[0:height, 0:width]
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    labels = site_class[np.argmin(d2, axis=-1)] + 1

    grid = np.linspace(0.0, 1.0, bands)
    base = 1.0 + 0.3 * np.sin(2 * np.pi * grid)
    spectra = []
    for _ in range(n_classes):
        centre, width_ = rng.uniform(0.1, 0.9), rng.uniform(0.08, 0.25)
        bump = np.exp(-0.5 * ((grid - centre) / width_) ** 2)
        spectra.append(base + separation * rng.uniform(0.3, 0.6) * bump * rng.choice([-1.0, 1.0]))
    spectra = np.stack(spectra)

    gain = 1.0 + 0.1 * rng.normal(size=(height, width, 1))
    values = spectra[labels - 1] * gain + noise * rng.normal(size=(height, width, bands))
    cube = HsiCube(values.astype(np.float32), f"synthetic-{n_classes}c-seed{seed}")
    gt = GroundTruth(labels.astype(np.uint16), [f"class_{i}" for i in range(1, n_classes + 1)])
    return cube, gt
