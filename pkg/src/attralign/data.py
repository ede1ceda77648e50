"""On-disk dataset format, loaders, and the synthetic dataset generator.

A dataset directory holds ``manifest.json`` plus one raw tensor file per
image.  Tensor files are a minimal binary container:

    magic  4 bytes   b"AGT1" (float32 payload) or b"AGT2" (float64)
    rank   u32 LE
    extent u32 LE  x rank
    data   payload, row-major, little-endian

Images are stored float32 ("AGT1"); checkpoints use the float64 variant so
that reloading reproduces results bit-exactly.  The manifest binds images to
attribute vectors (category- or image-level), class ids, and the
seen/validation/unseen class splits, which must be pairwise disjoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, DataFormatError

__all__ = [
    "write_tensor",
    "read_tensor",
    "GenSpec",
    "generate_synthetic",
    "DatasetClass",
    "Dataset",
    "load_dataset",
    "import_ppm",
]

MAGIC_F32 = b"AGT1"
MAGIC_F64 = b"AGT2"


def write_tensor(path, array: np.ndarray, dtype: str = "f4"):
    """Write an array as an AGT container; dtype 'f4' (AGT1) or 'f8' (AGT2)."""
    array = np.asarray(array)
    magic = MAGIC_F32 if dtype == "f4" else MAGIC_F64
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", array.ndim))
        for extent in array.shape:
            f.write(struct.pack("<I", extent))
        f.write(array.astype("<" + dtype).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an AGT container back as float64."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic == MAGIC_F32:
            dtype, itemsize = "<f4", 4
        elif magic == MAGIC_F64:
            dtype, itemsize = "<f8", 8
        else:
            raise DataFormatError(f"{path}: bad magic {magic!r}, not a tensor file")
        raw = f.read(4)
        if len(raw) < 4:
            raise DataFormatError(f"{path}: truncated header")
        (rank,) = struct.unpack("<I", raw)
        if rank > 32:
            raise DataFormatError(f"{path}: implausible rank {rank}")
        shape = []
        for _ in range(rank):
            raw = f.read(4)
            if len(raw) < 4:
                raise DataFormatError(f"{path}: truncated extent list")
            shape.append(struct.unpack("<I", raw)[0])
        count = int(np.prod(shape)) if shape else 1
        payload = f.read()
        if len(payload) != count * itemsize:
            raise DataFormatError(
                f"{path}: payload holds {len(payload)} bytes, extents "
                f"{tuple(shape)} require {count * itemsize}"
            )
        return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float64)


def import_ppm(path) -> np.ndarray:
    """Convert a binary PPM (P6) image into a (3, H, W) float array in [0,1]."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise DataFormatError(f"{path}: not a binary PPM (P6) file")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise DataFormatError(f"{path}: truncated PPM header")
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields[:3])
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise DataFormatError(f"{path}: truncated PPM payload")
        img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
        return np.moveaxis(img.astype(np.float64) / maxval, 2, 0)


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass
class DatasetClass:
    class_id: int
    images: np.ndarray  # (n, C, H, W) float64
    attrs: np.ndarray  # (n, D): category-level vectors are copied per sample


@dataclass
class Dataset:
    name: str
    attr_dim: int
    attribute_level: str
    classes: dict[int, DatasetClass]
    splits: dict[str, list[int]]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        first = next(iter(self.classes.values()))
        return tuple(first.images.shape[1:])

    def split_classes(self, split: str) -> list[int]:
        if split not in self.splits:
            raise CapacityError(f"unknown split {split!r}")
        return self.splits[split]


def _validate_manifest(manifest: dict, root: Path):
    for key in ("name", "attribute_dim", "attribute_level", "classes", "splits"):
        if key not in manifest:
            raise DataFormatError(f"manifest: missing field {key!r}")
    if manifest["attribute_level"] not in ("category", "image"):
        raise DataFormatError(
            f"manifest: attribute_level must be 'category' or 'image', "
            f"got {manifest['attribute_level']!r}"
        )
    splits = manifest["splits"]
    for name in ("seen", "validation", "unseen"):
        if name not in splits:
            raise DataFormatError(f"manifest: splits missing {name!r}")
    seen, val, unseen = (set(splits[k]) for k in ("seen", "validation", "unseen"))
    if seen & val or seen & unseen or val & unseen:
        raise DataFormatError("manifest: split overlap, class sets must be disjoint")
    declared = {c["class_id"] for c in manifest["classes"]}
    listed = seen | val | unseen
    if not listed <= declared:
        raise DataFormatError(
            f"manifest: splits reference unknown classes {sorted(listed - declared)}"
        )


def _check_attr(vec, d, where):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (d,):
        raise DataFormatError(
            f"manifest: attribute length mismatch at {where}: "
            f"got {vec.shape}, expected ({d},)"
        )
    if vec.min() < 0.0 or vec.max() > 1.0:
        raise DataFormatError(f"manifest: attribute values outside [0,1] at {where}")
    return vec


def load_dataset(manifest_path) -> Dataset:
    """Parse and fully validate a dataset directory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"manifest: invalid JSON ({e})") from e
    _validate_manifest(manifest, root)

    d = int(manifest["attribute_dim"])
    level = manifest["attribute_level"]
    classes: dict[int, DatasetClass] = {}
    shape = None
    for centry in manifest["classes"]:
        cid = int(centry["class_id"])
        cat_attr = None
        if level == "category":
            if "attribute_vector" not in centry:
                raise DataFormatError(
                    f"manifest: class {cid} missing category-level attribute_vector"
                )
            cat_attr = _check_attr(centry["attribute_vector"], d, f"class {cid}")
        images, attrs = [], []
        for sentry in centry["samples"]:
            fpath = root / sentry["image_file"]
            if not fpath.exists():
                raise DataFormatError(f"manifest: missing image file {fpath}")
            img = read_tensor(fpath)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DataFormatError(
                    f"manifest: image {fpath} has shape {img.shape}, expected {shape}"
                )
            images.append(img)
            if level == "image":
                if "attribute_vector" not in sentry:
                    raise DataFormatError(
                        f"manifest: sample {sentry['image_file']} missing "
                        "image-level attribute_vector"
                    )
                attrs.append(
                    _check_attr(sentry["attribute_vector"], d, sentry["image_file"])
                )
            else:
                attrs.append(cat_attr)
        classes[cid] = DatasetClass(
            class_id=cid, images=np.stack(images), attrs=np.stack(attrs)
        )
    return Dataset(
        name=manifest["name"],
        attr_dim=d,
        attribute_level=level,
        classes=classes,
        splits={k: list(manifest["splits"][k]) for k in ("seen", "validation", "unseen")},
    )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class GenSpec:
    """Recipe for the attribute-driven synthetic dataset.

    Each attribute owns a fixed image cell and a fixed color signature.  A
    class's binary attribute vector decides which cells get painted with
    which colors, identically for every sample of the class; per-sample
    distractor patches (same intensity scale, random cells/colors) and pixel
    noise provide the clutter that makes attribute guidance informative.
    """

    n_classes: int = 12
    samples_per_class: int = 20
    attr_dim: int = 16
    image_shape: tuple[int, int, int] = (3, 32, 32)
    noise_sd: float = 0.3
    distractor_count: int = 3
    patch_intensity: float = 1.5
    attr_density: float = 0.5


def _split_counts(n: int) -> tuple[int, int, int]:
    """60/20/20 split, nudged so seen and unseen can host 5-way episodes.

    Starting from floor(0.2 n) for validation and unseen, classes move from
    seen into unseen (then validation up to 2) while seen stays above 5.
    """
    n_val = max(1, int(0.2 * n))
    n_unseen = max(1, int(0.2 * n))
    n_seen = n - n_val - n_unseen
    while n_unseen < 5 and n_seen > 5:
        n_unseen += 1
        n_seen -= 1
    while n_val < 2 and n_seen > 5:
        n_val += 1
        n_seen -= 1
    return n_seen, n_val, n_unseen


def _attr_cells(d: int, height: int, width: int):
    """Attribute -> image cell mapping on a near-square grid."""
    grid = int(np.ceil(np.sqrt(d)))
    ch, cw = height // grid, width // grid
    if ch < 1 or cw < 1:
        raise ConfigError(
            f"attribute grid {grid}x{grid} does not fit a {height}x{width} image"
        )
    cells = []
    for a in range(d):
        r, c = divmod(a, grid)
        cells.append((r * ch, c * cw, ch, cw))
    return cells


def generate_synthetic(spec: GenSpec, seed: int, out_dir) -> Path:
    """Write a synthetic dataset directory; pure function of (spec, seed)."""
    if spec.n_classes < 6:
        raise ConfigError(
            f"need at least 6 classes for a three-way split, got {spec.n_classes}"
        )
    if spec.attr_dim < 4:
        raise ConfigError(f"need attr_dim >= 4, got {spec.attr_dim}")
    channels, height, width = spec.image_shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5D]))
    cells = _attr_cells(spec.attr_dim, height, width)

    # per-attribute color signature, unit-norm scaled to the patch intensity
    colors = rng.uniform(-1.0, 1.0, size=(spec.attr_dim, channels))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    colors *= spec.patch_intensity

    # distinct binary attribute vectors per class
    class_attrs = []
    seen_vectors = set()
    for _ in range(spec.n_classes):
        for attempt in range(101):
            if attempt == 100:
                raise ConfigError(
                    "could not draw distinct class attribute vectors in 100 tries"
                )
            vec = (rng.random(spec.attr_dim) < spec.attr_density).astype(np.float64)
            key = vec.tobytes()
            if vec.any() and key not in seen_vectors:
                seen_vectors.add(key)
                class_attrs.append(vec)
                break

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    def paint(canvas, attr_index, color):
        r0, c0, ch_, cw_ = cells[attr_index]
        canvas[:, r0 : r0 + ch_, c0 : c0 + cw_] += color[:, None, None]

    manifest_classes = []
    for cid in range(spec.n_classes):
        base = np.zeros(spec.image_shape)
        for a in np.flatnonzero(class_attrs[cid]):
            paint(base, a, colors[a])
        samples = []
        for s in range(spec.samples_per_class):
            img = base.copy()
            for _ in range(spec.distractor_count):
                cell = int(rng.integers(0, spec.attr_dim))
                color = rng.uniform(-1.0, 1.0, size=channels)
                color /= max(np.linalg.norm(color), 1e-9)
                paint(img, cell, color * spec.patch_intensity)
            if spec.noise_sd > 0:
                img += rng.normal(0.0, spec.noise_sd, size=img.shape)
            fname = f"images/c{cid:03d}_s{s:03d}.agt"
            write_tensor(out_dir / fname, img, dtype="f4")
            samples.append({"image_file": fname})
        manifest_classes.append(
            {
                "class_id": cid,
                "attribute_vector": class_attrs[cid].tolist(),
                "samples": samples,
            }
        )

    n_seen, n_val, n_unseen = _split_counts(spec.n_classes)
    order = list(rng.permutation(spec.n_classes))
    splits = {
        "seen": sorted(int(c) for c in order[:n_seen]),
        "validation": sorted(int(c) for c in order[n_seen : n_seen + n_val]),
        "unseen": sorted(int(c) for c in order[n_seen + n_val :]),
    }
    manifest = {
        "name": f"synthetic-{spec.n_classes}c-{spec.attr_dim}d-seed{seed}",
        "attribute_dim": spec.attr_dim,
        "attribute_level": "category",
        "classes": manifest_classes,
        "splits": splits,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir
