"""Procedural identity x view image generator.

Each identity draws a fixed figure (head/torso/leg colours, torso stripes,
body width). Ground renders show the figure as drawn. Aerial renders blend in
an overhead warp (rows remapped so head and shoulders grow and legs shrink),
a lower-contrast bluish cast and a top-to-bottom brightness gradient;
``view_strength`` sets the blend. Gaussian pixel noise is added last and the
result is quantised to 8 bits so on-disk PNGs are exact copies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

GROUND, AERIAL = 0, 1
SPLITS = ("train", "query", "gallery")


class DatasetConfigError(ValueError):
    pass


@dataclass
class FactorSpec:
    num_identities: int = 16
    samples_per_id_per_view: int = 16
    identity_dim: int = 12
    view_dim: int = 3
    noise_sigma: float = 0.04
    view_strength: float = 1.0
    image_size: Tuple[int, int] = (64, 32)
    seed: int = 0
    cameras_per_view: int = 2
    train_fraction: float = 0.5

    def __post_init__(self) -> None:
        self.image_size = tuple(self.image_size)

    def validate(self) -> None:
        if self.num_identities < 2:
            raise DatasetConfigError("need at least 2 identities")
        if self.samples_per_id_per_view < 1:
            raise DatasetConfigError("need at least 1 sample per identity and view")
        if self.noise_sigma < 0:
            raise DatasetConfigError("noise_sigma must be non-negative")
        if self.cameras_per_view < 1:
            raise DatasetConfigError("need at least one camera per view")
        n_train = self.num_train_ids
        if n_train < 1 or n_train >= self.num_identities:
            raise DatasetConfigError("train/test identity split would leave a side empty")

    @property
    def num_train_ids(self) -> int:
        return int(round(self.num_identities * self.train_fraction))


@dataclass
class IdentityCode:
    """Latent identity factor; ``vector`` is the flat parameter vector it was decoded from."""

    identity: int
    vector: np.ndarray
    head: np.ndarray
    torso: np.ndarray
    legs: np.ndarray
    stripe: np.ndarray
    stripe_freq: float
    stripe_vertical: bool
    width: float
    waist: float


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [N, H, W, 3] uint8
    manifest: List[dict]
    spec: Optional[FactorSpec] = None

    def split_indices(self, split: str) -> np.ndarray:
        return np.asarray([r["index"] for r in self.manifest if r["split"] == split], dtype=int)

    def pixels(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """Float ``[n, 3, H, W]`` in [0, 1]."""
        imgs = self.images if indices is None else self.images[indices]
        return imgs.transpose(0, 3, 1, 2).astype(np.float32) / 255.0

    def column(self, key: str, indices: Optional[np.ndarray] = None) -> np.ndarray:
        rows = self.manifest if indices is None else [self.manifest[i] for i in indices]
        return np.asarray([r[key] for r in rows])


def identity_code(spec: FactorSpec, identity: int) -> IdentityCode:
    if not 0 <= identity < spec.num_identities:
        raise ValueError(f"identity {identity} out of range")
    rng = np.random.default_rng([spec.seed, 1, identity])
    v = rng.uniform(0.0, 1.0, size=max(spec.identity_dim, 12))
    return IdentityCode(
        identity=identity,
        vector=v,
        head=0.15 + 0.7 * v[0:3],
        torso=0.15 + 0.7 * v[3:6],
        legs=0.15 + 0.7 * v[6:9],
        stripe=0.3 * (v[9:12] - 0.5),
        stripe_freq=2.0 + 4.0 * float(v[0] * v[5] % 1.0),
        stripe_vertical=bool(v[8] > 0.5),
        width=0.45 + 0.35 * float(v[4]),
        waist=0.5 + 0.1 * (float(v[7]) - 0.5),
    )


def draw_figure(code: IdentityCode, size: Tuple[int, int]) -> np.ndarray:
    """The view-free appearance: float ``[H, W, 3]``."""
    h, w = size
    ys = (np.arange(h) + 0.5)[:, None] / h
    xs = (np.arange(w) + 0.5)[None, :] / w
    img = np.full((h, w, 3), 0.5)
    cx = np.abs(xs - 0.5)
    head = ((ys - 0.1) / 0.09) ** 2 + (cx / 0.16) ** 2 <= 1.0
    torso = (ys >= 0.2) & (ys < code.waist) & (cx <= code.width / 2)
    legs = (ys >= code.waist) & (ys < 0.97) & (cx <= code.width / 2.4) & (cx >= 0.03)
    phase = xs if code.stripe_vertical else ys
    stripes = np.sign(np.sin(2 * np.pi * code.stripe_freq * phase * 3))[..., None] * code.stripe
    img[head] = code.head
    img[torso] = (code.torso + np.broadcast_to(stripes, (h, w, 3)))[torso]
    img[legs] = code.legs
    return img


def _overhead_warp(img: np.ndarray) -> np.ndarray:
    """Remap rows so the top of the figure is enlarged and the bottom foreshortened."""
    h = img.shape[0]
    t = (np.arange(h) + 0.5) / h
    src = np.clip((t**1.8) * h - 0.5, 0, h - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, h - 1)
    frac = (src - lo)[:, None, None]
    return img[lo] * (1 - frac) + img[hi] * frac


def view_transform(img: np.ndarray, view_label: int, strength: float) -> np.ndarray:
    if view_label == GROUND or strength == 0:
        return img
    h = img.shape[0]
    gradient = np.linspace(0.12, -0.12, h)[:, None, None]
    aerial = 0.5 + 0.7 * (_overhead_warp(img) - 0.5)
    aerial = aerial + np.array([-0.06, 0.0, 0.1]) + gradient
    return img + strength * (aerial - img)


def render_sample(
    code: IdentityCode,
    view_label: int,
    spec: FactorSpec,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """One uint8 ``[H, W, 3]`` image; noise is drawn from ``rng`` when ``noise_sigma > 0``."""
    img = view_transform(draw_figure(code, spec.image_size), view_label, spec.view_strength)
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng")
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def sample_rng(spec: FactorSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 2, index])


def generate_dataset(spec: FactorSpec) -> SyntheticDataset:
    """Render every (identity, view, sample) and assign splits.

    The first ``num_train_ids`` identities form the training split. For the
    rest, the first ``max(1, S // 4)`` samples of each (identity, view) are
    queries and the others gallery. Cameras cycle within a view:
    ground uses ``0..c-1`` and aerial ``c..2c-1``.
    """
    spec.validate()
    s = spec.samples_per_id_per_view
    c = spec.cameras_per_view
    n_query = max(1, s // 4)
    images, manifest = [], []
    index = 0
    for ident in range(spec.num_identities):
        code = identity_code(spec, ident)
        train = ident < spec.num_train_ids
        for view in (GROUND, AERIAL):
            for j in range(s):
                images.append(render_sample(code, view, spec, sample_rng(spec, index)))
                split = "train" if train else ("query" if j < n_query else "gallery")
                manifest.append(
                    {
                        "index": index,
                        "sample_path": None,
                        "identity_label": ident,
                        "view_label": view,
                        "camera_id": view * c + (j % c),
                        "split": split,
                    }
                )
                index += 1
    return SyntheticDataset(images=np.stack(images), manifest=manifest, spec=spec)


def write_dataset(ds: SyntheticDataset, root: Path) -> Path:
    """PNG per sample under ``<root>/<split>/`` and ``<root>/manifest.jsonl``."""
    root = Path(root)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    lines = []
    for row, img in zip(ds.manifest, ds.images):
        rel = f"{row['split']}/{row['index']:06d}.png"
        Image.fromarray(img, mode="RGB").save(root / rel)
        lines.append(json.dumps({**row, "sample_path": rel}))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    if ds.spec is not None:
        (root / "factor_spec.json").write_text(json.dumps(asdict(ds.spec), indent=1))
    return root / "manifest.jsonl"


def read_manifest(path: Path) -> List[dict]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    required = {"sample_path", "identity_label", "view_label", "camera_id", "split"}
    for i, row in enumerate(rows):
        missing = required - row.keys()
        if missing:
            raise ValueError(f"manifest row {i} lacks {sorted(missing)}")
        row.setdefault("index", i)
    return rows


def load_dataset(root: Path) -> SyntheticDataset:
    """Load any dataset laid out as ``manifest.jsonl`` plus image files (real or synthetic)."""
    root = Path(root)
    manifest = read_manifest(root / "manifest.jsonl")
    images = []
    for i, row in enumerate(manifest):
        row["index"] = i
        images.append(np.asarray(Image.open(root / row["sample_path"]).convert("RGB")))
    spec = None
    spec_path = root / "factor_spec.json"
    if spec_path.exists():
        spec = FactorSpec(**json.loads(spec_path.read_text()))
    return SyntheticDataset(images=np.stack(images), manifest=manifest, spec=spec)
