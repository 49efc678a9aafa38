"""Procedural 2-D chest phantoms in two texture domains with exact label maps.

Domain ``high_dose`` is nearly clean; ``low_dose`` carries strong correlated
noise and streaks. Anatomy is drawn from ellipses so the masks are exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    AnnotatedSample,
    DatasetManifest,
    IntensityGrid,
    LabelSchema,
    SegMap,
    write_dataset,
)

DOMAIN_A = "high_dose"
DOMAIN_B = "low_dose"

MIN_SEPARATION = 0.08
MAX_RESAMPLE = 50


class PhantomError(Exception):
    pass


@dataclass(frozen=True)
class TextureDomain:
    noise_std: float = 0.02
    corr_len: float = 0.8  # gaussian smoothing sigma of the noise field, px
    streak_amp: float = 0.0
    streak_angles: tuple[float, float] = (0.0, 180.0)  # degrees
    n_streaks: int = 6

    def __post_init__(self):
        if self.noise_std < 0 or self.streak_amp < 0 or self.corr_len < 0:
            raise PhantomError("noise std, streak amplitude and correlation length must be >= 0")


def _default_intensities() -> dict:
    return {
        "background": 0.0,
        "torso_tissue": 0.40,
        "bone": 0.86,
        "lungs": 0.18,
        "heart": 0.56,
        "spinal_cord": 0.72,
        "esophagus": 0.29,
    }


def _default_domains() -> dict:
    return {
        DOMAIN_A: TextureDomain(noise_std=0.02, corr_len=0.8),
        DOMAIN_B: TextureDomain(noise_std=0.12, corr_len=1.5, streak_amp=0.05),
    }


@dataclass(frozen=True)
class PhantomSpec:
    side: int = 128
    intensities: dict = field(default_factory=_default_intensities)
    domains: dict = field(default_factory=_default_domains)
    center_jitter: float = 0.03  # fraction of the side
    axis_jitter: float = 0.12  # relative scale change of organ axes
    seed: int = 0
    schema: LabelSchema = field(default_factory=LabelSchema)

    def __post_init__(self):
        if self.side < 32:
            raise PhantomError("phantom side must be >= 32")
        missing = set(self.schema.names) - set(self.intensities)
        if missing:
            raise PhantomError(f"no base intensity for {sorted(missing)}")
        vals = sorted(self.intensities[n] for n in self.schema.names)
        if any(v < 0 or v > 1 for v in vals):
            raise PhantomError("base intensities must lie in [0, 1]")
        if min(np.diff(vals)) < MIN_SEPARATION - 1e-12:
            raise PhantomError(f"base intensities must be >= {MIN_SEPARATION} apart")
        for k, d in self.domains.items():
            if not isinstance(d, TextureDomain):
                self.domains[k] = TextureDomain(**d)

    def to_json(self) -> dict:
        return {
            "side": self.side,
            "intensities": dict(self.intensities),
            "domains": {k: asdict(v) for k, v in self.domains.items()},
            "center_jitter": self.center_jitter,
            "axis_jitter": self.axis_jitter,
            "seed": self.seed,
            "schema": list(self.schema.names),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "schema" in d:
            d["schema"] = LabelSchema(tuple(d["schema"]))
        if "domains" in d:
            d["domains"] = {
                k: TextureDomain(**{kk: (tuple(vv) if isinstance(vv, list) else vv)
                                    for kk, vv in v.items()})
                for k, v in d["domains"].items()
            }
        return cls(**d)


# nominal anatomy: (cx, cy, ax, ay) as fractions of the side, y pointing down
_ANATOMY = {
    "torso": (0.50, 0.52, 0.42, 0.32),
    "lung_l": (0.32, 0.47, 0.12, 0.19),
    "lung_r": (0.68, 0.47, 0.12, 0.19),
    "heart": (0.54, 0.50, 0.10, 0.09),
    "esophagus": (0.49, 0.63, 0.024, 0.024),
    "vertebra": (0.50, 0.735, 0.065, 0.055),
    "cord": (0.50, 0.735, 0.026, 0.024),
}
_RIB_INNER, _RIB_OUTER, _N_RIBS = 0.86, 0.94, 14


def _ellipse(yy, xx, e):
    cx, cy, ax, ay = e
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2


def _sample_anatomy(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    out = {}
    for name, (cx, cy, ax, ay) in _ANATOMY.items():
        j = spec.center_jitter if name != "torso" else spec.center_jitter / 2
        s = 1.0 + rng.uniform(-spec.axis_jitter, spec.axis_jitter, size=2)
        out[name] = (cx + rng.uniform(-j, j), cy + rng.uniform(-j, j), ax * s[0], ay * s[1])
    # keep the cord centred in its vertebra
    v = out["vertebra"]
    c = out["cord"]
    out["cord"] = (v[0], v[1], c[2], c[3])
    out["rib_phase"] = rng.uniform(0, 2 * np.pi)
    return out


def _inside_torso(anat: dict) -> bool:
    t = anat["torso"]
    theta = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    for name in ("lung_l", "lung_r", "heart", "esophagus", "vertebra"):
        cx, cy, ax, ay = anat[name]
        px, py = cx + ax * np.cos(theta), cy + ay * np.sin(theta)
        r = np.sqrt(_ellipse(py, px, t))
        if name == "vertebra":
            if r.max() >= 1.0:
                return False
        elif r.max() >= _RIB_INNER:
            return False
    return True


def render_mask(spec: PhantomSpec, anat: dict) -> np.ndarray:
    n = spec.side
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    yy, xx = (yy + 0.5) / n, (xx + 0.5) / n
    sc = spec.schema
    lab = np.zeros((n, n), np.uint8)

    def paint(region, name):
        if name in sc.names:
            lab[region] = sc.id_of(name)

    rt = _ellipse(yy, xx, anat["torso"])
    paint(rt < 1.0, "torso_tissue")
    t = anat["torso"]
    ang = np.arctan2((yy - t[1]) / t[3], (xx - t[0]) / t[2])
    ribs = (np.cos(_N_RIBS * ang + anat["rib_phase"]) > 0.1)
    r = np.sqrt(rt)
    # no ribs across the anterior midline (sternum gap) or the spine
    paint((r >= _RIB_INNER) & (r < _RIB_OUTER) & ribs & (np.abs(np.cos(ang)) > 0.25), "bone")
    paint(_ellipse(yy, xx, anat["lung_l"]) < 1.0, "lungs")
    paint(_ellipse(yy, xx, anat["lung_r"]) < 1.0, "lungs")
    paint(_ellipse(yy, xx, anat["heart"]) < 1.0, "heart")
    paint(_ellipse(yy, xx, anat["esophagus"]) < 1.0, "esophagus")
    paint(_ellipse(yy, xx, anat["vertebra"]) < 1.0, "bone")
    paint(_ellipse(yy, xx, anat["cord"]) < 1.0, "spinal_cord")
    return lab


def texture_field(shape: tuple[int, int], domain: TextureDomain,
                  rng: np.random.Generator) -> np.ndarray:
    """Zero-mean correlated noise plus optional streaks for one texture domain."""
    h, w = shape
    white = rng.standard_normal((h, w))
    if domain.corr_len > 0:
        field_ = ndimage.gaussian_filter(white, domain.corr_len, mode="wrap")
        field_ /= field_.std()
    else:
        field_ = white
    out = domain.noise_std * field_
    if domain.streak_amp > 0 and domain.n_streaks > 0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        lo, hi = np.deg2rad(domain.streak_angles)
        for _ in range(domain.n_streaks):
            theta = rng.uniform(lo, hi)
            py, px = h / 2 + rng.normal(0, h / 10), w / 2 + rng.normal(0, w / 10)
            d = (xx - px) * np.sin(theta) - (yy - py) * np.cos(theta)
            amp = domain.streak_amp * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
            out += amp * np.exp(-0.5 * d**2)
    return out


def _rngs(spec: PhantomSpec, sample_seed: int, domain: str):
    anat = np.random.default_rng([spec.seed, sample_seed, 0])
    # texture stream keyed on the domain name so domains differ for one anatomy
    key = int.from_bytes(domain.encode()[:8].ljust(8, b"\0"), "little")
    tex = np.random.default_rng([spec.seed, sample_seed, 1, key])
    return anat, tex


def generate_phantom(spec: PhantomSpec, sample_seed: int, domain: str = DOMAIN_A,
                     split: str = "train", sample_id: str | None = None) -> AnnotatedSample:
    """One phantom slice; anatomy depends on ``sample_seed`` only, texture on the domain too."""
    if domain not in spec.domains:
        raise PhantomError(f"unknown texture domain {domain!r}")
    arng, trng = _rngs(spec, sample_seed, domain)
    for _ in range(MAX_RESAMPLE):
        anat = _sample_anatomy(spec, arng)
        if _inside_torso(anat):
            break
    else:
        raise PhantomError(f"no valid anatomy after {MAX_RESAMPLE} draws (seed {sample_seed})")
    labels = render_mask(spec, anat)
    base = np.array([spec.intensities[n] for n in spec.schema.names])[labels]
    body = labels != 0
    tex = texture_field(labels.shape, spec.domains[domain], trng)
    image = np.clip(base + np.where(body, tex, 0.0), 0.0, 1.0)
    sid = sample_id or f"{domain}_{sample_seed:05d}"
    meta = {"anatomy_seed": int(sample_seed)}
    return AnnotatedSample(sid, IntensityGrid(image), SegMap(labels, spec.schema),
                           domain, split, meta)


def texture_residual_std(image: np.ndarray, labels: np.ndarray) -> float:
    """Std of the image after removing each segment's mean, over body pixels.

    Strips the piecewise-constant anatomy and keeps the texture.
    """
    image = np.asarray(image, np.float64)
    labels = np.asarray(labels)
    resid = np.zeros_like(image)
    for c in np.unique(labels):
        sel = labels == c
        resid[sel] = image[sel] - image[sel].mean()
    return float(resid[labels != 0].std())


def generate_phantom_dataset(spec: PhantomSpec, n_train_A: int, n_test_B: int,
                             n_style_B: int, seed: int, out_dir: str | Path,
                             domain_a: str = DOMAIN_A, domain_b: str = DOMAIN_B
                             ) -> DatasetManifest:
    """Write the train (domain A), test and style (domain B) splits plus a manifest.

    Anatomy seeds are drawn without replacement so no two samples, in any
    split, share an anatomy.
    """
    counts = (n_train_A, n_test_B, n_style_B)
    if min(counts) < 0:
        raise PhantomError("sample counts must be >= 0")
    total = sum(counts)
    if total == 0:
        raise PhantomError("dataset would be empty")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(10 * total + 1000, size=total, replace=False)
    samples = []
    k = 0
    for split, n, dom in (("train", n_train_A, domain_a), ("test", n_test_B, domain_b),
                          ("style", n_style_B, domain_b)):
        for i in range(n):
            s = int(seeds[k])
            k += 1
            samples.append(generate_phantom(spec, s, dom, split, f"{split}_{i:04d}"))
    return write_dataset(samples, out_dir, spec.schema)
