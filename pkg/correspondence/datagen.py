"""
Self-supervised sample factory.

A sample is built in three steps: a base image is warped by a random
homography and both frames are cropped, small local elastic perturbations
are added to the reference, then independently moving objects are pasted in
one after the other, each treating everything inserted before it as
background. The injective and occlusion masks are derived last from the final
ground-truth flow and the per-frame layer maps.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from app.utils.workers import parallel_map

from .exceptions import DatasetEmpty, ImageTooSmall, ShapeMismatch
from .formats import (read_flo, read_image, read_manifest, read_pfm, write_flo, write_image,
                      write_manifest, write_pfm)
from .geometry import (AffineSpec, FlowField, Homography, PerturbationSpec, bilinear_sample,
                       compose_flows, elastic_field, gaussian_mask, homography_to_flow,
                       sample_random_affine, sample_random_homography, warp_bilinear)

logger = logging.getLogger(__name__)

BOTH = 'both'
REFERENCE_ONLY = 'reference'
QUERY_ONLY = 'query'
PRESENCES = (BOTH, REFERENCE_ONLY, QUERY_ONLY)

BACKGROUND = 0
MANIFEST_NAME = 'manifest.json'
IMAGE_SUFFIXES = ('.ppm', '.png')


@dataclass(frozen=True)
class ObjectSpec:
    """How many objects to insert and how they look and move"""

    count: int = 4
    insert_probability: float = 0.8
    radius_range: Tuple[float, float] = (4.0, 12.0)
    motion: AffineSpec = field(default_factory=AffineSpec)
    reference_only_probability: float = 0.1
    query_only_probability: float = 0.1

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"object count must be non-negative, got {self.count}")
        if not 0.0 <= self.insert_probability <= 1.0:
            raise ValueError(f"insert probability must lie in [0, 1], got {self.insert_probability}")
        if self.reference_only_probability + self.query_only_probability > 1.0:
            raise ValueError("presence probabilities exceed 1")


@dataclass
class ObjectLayer:
    """Record of one inserted object"""

    priority: int
    presence: str
    reference_mask: np.ndarray
    query_mask: np.ndarray
    motion: Homography


@dataclass
class SamplePack:
    """One training pair with its ground truth and masks"""

    query: np.ndarray
    reference: np.ndarray
    gt_flow: FlowField
    inj_mask: Optional[np.ndarray] = None
    occ_mask: Optional[np.ndarray] = None
    reference_layers: Optional[np.ndarray] = None
    query_layers: Optional[np.ndarray] = None
    layers: List[ObjectLayer] = field(default_factory=list)

    def __post_init__(self):
        if self.query.shape != self.reference.shape or self.query.shape[:2] != self.gt_flow.shape:
            raise ShapeMismatch(
                f"query {self.query.shape}, reference {self.reference.shape} "
                f"and flow {self.gt_flow.shape} disagree"
            )
        if self.reference_layers is None:
            self.reference_layers = np.full(self.shape, BACKGROUND, dtype=np.int32)
        if self.query_layers is None:
            self.query_layers = np.full(self.shape, BACKGROUND, dtype=np.int32)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gt_flow.shape

    def copy(self) -> 'SamplePack':
        return SamplePack(
            query=self.query.copy(),
            reference=self.reference.copy(),
            gt_flow=self.gt_flow.copy(),
            inj_mask=None if self.inj_mask is None else self.inj_mask.copy(),
            occ_mask=None if self.occ_mask is None else self.occ_mask.copy(),
            reference_layers=self.reference_layers.copy(),
            query_layers=self.query_layers.copy(),
            layers=list(self.layers),
        )


def noise_texture(height: int, width: int, rng: np.random.Generator, octaves: int = 4,
                  channels: int = 3) -> np.ndarray:
    """Seeded multi-octave smooth noise in [0, 1]"""
    image = np.zeros((height, width, channels))
    amplitude = 1.0
    for octave in range(octaves):
        sigma = max(max(height, width) / (4.0 * 2 ** octave), 1.5)
        layer = gaussian_filter(rng.random((height, width, channels)), sigma=(sigma, sigma, 0),
                                mode='wrap')
        layer = (layer - layer.mean()) / (layer.std() + 1e-12)
        image += amplitude * layer
        amplitude *= 0.5
    lo, hi = image.min(), image.max()
    return (image - lo) / (hi - lo) if hi > lo else np.full_like(image, 0.5)


def load_base_images(directory, size: Tuple[int, int]) -> List[np.ndarray]:
    """Load every PPM/PNG in ``directory``, resized to (height, width)"""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DatasetEmpty(f"no PPM/PNG images in {directory}")
    height, width = size
    images = []
    for path in paths:
        with Image.open(path) as img:
            resized = img.convert('RGB').resize((width, height), Image.Resampling.BILINEAR)
            images.append(np.asarray(resized, dtype=np.float64) / 255.0)
    logger.info(f"Loaded {len(images)} base images from {directory}")
    return images


def generate_base_pair(base_image: np.ndarray, transform: Homography, crop_size: Tuple[int, int],
                       margin: int) -> Tuple[np.ndarray, np.ndarray, FlowField]:
    """Warp ``base_image`` by ``transform`` and crop both frames centrally.

    ``transform`` moves content forward: the reference shows the base sampled
    through its inverse, the query is the plain central crop. The returned flow
    relates reference pixels to query pixels in crop coordinates.
    """
    base_image = np.asarray(base_image, dtype=np.float64)
    height, width = crop_size
    base_h, base_w = base_image.shape[:2]
    if base_h < height + 2 * margin or base_w < width + 2 * margin:
        raise ImageTooSmall(
            f"base image {base_w}x{base_h} cannot hold a {width}x{height} crop "
            f"with margin {margin}"
        )
    off_x, off_y = (base_w - width) // 2, (base_h - height) // 2
    query = base_image[off_y:off_y + height, off_x:off_x + width].copy()

    crop_transform = (Homography.translation(-off_x, -off_y) @ transform.inverse()
                      @ Homography.translation(off_x, off_y))
    flow = homography_to_flow(crop_transform, width, height)
    xs, ys = flow.targets()
    xs = np.where(flow.valid, xs + off_x, np.nan)
    ys = np.where(flow.valid, ys + off_y, np.nan)
    reference, _ = bilinear_sample(base_image, xs, ys)
    return query, reference, flow


def apply_perturbations(pack: SamplePack, spec: PerturbationSpec,
                        rng: np.random.Generator) -> Tuple[SamplePack, FlowField]:
    """Add eps = sum_i E_i * S_i to the reference; flow becomes base(x + eps) + eps"""
    if spec.count == 0:
        return pack, pack.gt_flow
    height, width = pack.shape
    residual = np.zeros((height, width, 2))
    for _ in range(spec.count):
        elastic = elastic_field(width, height, spec, rng)
        center = rng.uniform((0.0, 0.0), (width - 1.0, height - 1.0))
        std = rng.uniform(*spec.mask_std_range)
        residual += elastic.vectors * gaussian_mask(center, std, width, height)[..., None]
    eps = FlowField(residual, np.ones((height, width), dtype=bool))

    reference, _ = warp_bilinear(pack.reference, eps)
    flow = compose_flows(pack.gt_flow, eps)
    return replace(pack, reference=reference, gt_flow=flow), flow


def insert_object(pack: SamplePack, motion: Homography, reference_mask: np.ndarray,
                  texture: np.ndarray, presence: str = BOTH) -> SamplePack:
    """Paste an object with its own motion on top of everything inserted so far.

    ``presence`` selects where the object exists: ``both`` frames, only the
    ``reference`` or only the ``query``. Ground truth is overwritten only when
    the object is visible in both frames.
    """
    if presence not in PRESENCES:
        raise ValueError(f"presence must be one of {PRESENCES}, got {presence!r}")
    reference_mask = np.asarray(reference_mask, dtype=bool)
    if reference_mask.shape != pack.shape or texture.shape != pack.reference.shape:
        raise ShapeMismatch("object mask and texture must match the sample frame")
    height, width = pack.shape
    priority = len(pack.layers) + 1

    backward = homography_to_flow(motion.inverse(), width, height)
    bx, by = backward.targets()
    bx = np.where(backward.valid, bx, np.nan)
    by = np.where(backward.valid, by, np.nan)
    coverage, _ = bilinear_sample(reference_mask.astype(np.float64), bx, by)
    query_mask = (coverage >= 0.5) & backward.valid
    query_texture, _ = bilinear_sample(texture, bx, by)

    result = pack.copy()
    if presence in (BOTH, REFERENCE_ONLY):
        result.reference[reference_mask] = texture[reference_mask]
        result.reference_layers[reference_mask] = priority
    if presence in (BOTH, QUERY_ONLY):
        result.query[query_mask] = query_texture[query_mask]
        result.query_layers[query_mask] = priority
    if presence == BOTH:
        object_flow = homography_to_flow(motion, width, height)
        result.gt_flow.vectors[reference_mask] = object_flow.vectors[reference_mask]
        result.gt_flow.valid[reference_mask] = object_flow.valid[reference_mask]

    result.layers.append(ObjectLayer(priority, presence, reference_mask, query_mask, motion))
    result.inj_mask = result.occ_mask = None
    return result


def rounded_targets(flow: FlowField) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer query cells floor(x + Y(x) + 0.5) and whether they fall inside the frame"""
    xs, ys = flow.targets()
    xs = np.where(flow.valid, xs, -1.0)
    ys = np.where(flow.valid, ys, -1.0)
    tx = np.floor(xs + 0.5)
    ty = np.floor(ys + 0.5)
    in_view = flow.valid & (tx >= 0) & (tx < flow.width) & (ty >= 0) & (ty < flow.height)
    tx = np.where(in_view, tx, 0).astype(np.int64)
    ty = np.where(in_view, ty, 0).astype(np.int64)
    return tx, ty, in_view


def compute_masks(pack: SamplePack) -> Tuple[np.ndarray, np.ndarray]:
    """Injective mask and occlusion mask of a finished sample.

    A reference pixel is occluded when the content visible at its rounded query
    target comes from another layer. When several reference pixels land in the
    same query cell, one claimant is kept: the one visible there, then the one
    with the higher layer priority, then the first in raster order. The others
    form the injective mask, which is also part of the occlusion mask. Targets
    outside the query frame are never masked.
    """
    height, width = pack.shape
    tx, ty, in_view = rounded_targets(pack.gt_flow)
    source = pack.reference_layers
    seen = np.where(in_view, pack.query_layers[ty, tx], -1)
    visible = in_view & (seen == source)

    claimants = np.flatnonzero(in_view)
    cells = (ty * width + tx).ravel()[claimants]
    order = np.lexsort((
        claimants,
        -source.ravel()[claimants],
        ~visible.ravel()[claimants],
        cells,
    ))
    ranked_cells = cells[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = ranked_cells[1:] != ranked_cells[:-1]

    inj = np.zeros(height * width, dtype=bool)
    inj[claimants[order][~first]] = True
    inj = inj.reshape(height, width)
    occ = (in_view & ~visible) | inj
    return inj, occ


def is_injective(pack: SamplePack, inj_mask: Optional[np.ndarray] = None) -> bool:
    """True when no two unmasked in-view reference pixels share a rounded query cell"""
    inj_mask = pack.inj_mask if inj_mask is None else inj_mask
    tx, ty, in_view = rounded_targets(pack.gt_flow)
    keep = in_view & ~inj_mask
    cells = (ty * pack.gt_flow.width + tx)[keep]
    return len(np.unique(cells)) == len(cells)


def random_object_mask(width: int, height: int, spec: ObjectSpec,
                       rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Random star-shaped polygon rasterised into a boolean mask; returns (mask, centre)"""
    center = rng.uniform((0.0, 0.0), (width - 1.0, height - 1.0))
    radius = rng.uniform(*spec.radius_range)
    vertices = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=vertices))
    radii = radius * rng.uniform(0.6, 1.0, size=vertices)
    points = center + np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=-1)

    canvas = Image.new('L', (width, height), 0)
    ImageDraw.Draw(canvas).polygon([tuple(p) for p in points], fill=1)
    return np.asarray(canvas, dtype=bool), center


def object_texture(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    tint = rng.random(3)
    return np.clip(0.5 * noise_texture(height, width, rng, octaves=3) + 0.5 * tint, 0.0, 1.0)


def sample_presence(spec: ObjectSpec, rng: np.random.Generator) -> str:
    u = rng.random()
    if u < spec.reference_only_probability:
        return REFERENCE_ONLY
    if u < spec.reference_only_probability + spec.query_only_probability:
        return QUERY_ONLY
    return BOTH


def generate_sample(config, rng: np.random.Generator,
                    base_images: Optional[Sequence[np.ndarray]] = None) -> SamplePack:
    """Run the full pipeline for one sample"""
    height, width = config.image_height, config.image_width
    base_h, base_w = config.base_size
    if base_images:
        base = base_images[int(rng.integers(len(base_images)))]
    else:
        base = noise_texture(base_h, base_w, rng)

    transform = sample_random_homography(config.homography_spec(), rng)
    query, reference, flow = generate_base_pair(base, transform, (height, width), config.crop_margin)
    pack = SamplePack(query=query, reference=reference, gt_flow=flow)
    pack, _ = apply_perturbations(pack, config.perturbation_spec(), rng)

    spec = config.object_spec()
    for _ in range(spec.count):
        if rng.random() >= spec.insert_probability:
            continue
        mask, center = random_object_mask(width, height, spec, rng)
        texture = object_texture(height, width, rng)
        motion = sample_random_affine(spec.motion, rng, center)
        pack = insert_object(pack, motion, mask, texture, sample_presence(spec, rng))

    pack.inj_mask, pack.occ_mask = compute_masks(pack)
    return pack


def sample_name(index: int) -> str:
    return f"sample{index:05d}"


def write_sample(directory, pack: SamplePack):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_image(directory / 'query.ppm', pack.query)
    write_image(directory / 'reference.ppm', pack.reference)
    write_flo(directory / 'flow.flo', pack.gt_flow)
    write_pfm(directory / 'inj_mask.pfm', pack.inj_mask.astype(np.float32))
    write_pfm(directory / 'occ_mask.pfm', pack.occ_mask.astype(np.float32))


def load_sample(directory) -> SamplePack:
    directory = Path(directory)
    return SamplePack(
        query=read_image(directory / 'query.ppm'),
        reference=read_image(directory / 'reference.ppm'),
        gt_flow=read_flo(directory / 'flow.flo'),
        inj_mask=read_pfm(directory / 'inj_mask.pfm') > 0.5,
        occ_mask=read_pfm(directory / 'occ_mask.pfm') > 0.5,
    )


def list_samples(root) -> List[Path]:
    """Sample directories of a dataset, in index order"""
    root = Path(root)
    if not root.is_dir():
        raise DatasetEmpty(f"dataset directory {root} does not exist")
    samples = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith('sample'))
    if not samples:
        raise DatasetEmpty(f"no samples in {root}")
    return samples


def read_dataset_manifest(root) -> dict:
    path = Path(root) / MANIFEST_NAME
    return read_manifest(path) if path.exists() else {}


def generate_dataset(config, output_dir, threads: Optional[int] = None,
                     base_images: Optional[Sequence[np.ndarray]] = None) -> dict:
    """Write ``config.num_samples`` samples plus a manifest to ``output_dir``.

    Sample ``i`` draws from ``default_rng([seed, i])`` so the output does not
    depend on the thread count.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    def build(index: int) -> str:
        rng = np.random.default_rng([config.seed, index])
        pack = generate_sample(config, rng, base_images)
        name = sample_name(index)
        write_sample(output_dir / name, pack)
        return name

    names = parallel_map(build, range(config.num_samples), threads, progress='gendata')
    manifest = {
        'seed': config.seed,
        'config_hash': config.config_hash(),
        'count': len(names),
        'image_height': config.image_height,
        'image_width': config.image_width,
        'samples': names,
    }
    write_manifest(output_dir / MANIFEST_NAME, manifest)
    logger.info(f"Generated {len(names)} samples in {output_dir} (seed={config.seed})")
    return manifest
