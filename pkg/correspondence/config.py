"""
Run configuration: key=value file values merged with command-line overrides,
validated by RunConfigSerializer, plus builders for the domain specs.
"""

import hashlib
import json
import logging
from typing import Dict, Optional

from rest_framework.serializers import ValidationError

from .datagen import ObjectSpec
from .formats import read_key_value_config
from .geometry import AffineSpec, HomographySpec, PerturbationSpec
from .mixture import ConstraintSpec
from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)


class RunConfig:
    """Validated configuration with attribute access"""

    def __init__(self, values: Dict):
        self._values = dict(values)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict] = None) -> 'RunConfig':
        """Read ``path`` (if any), apply ``overrides`` and validate.

        Raises rest_framework.serializers.ValidationError on bad values.
        """
        raw = read_key_value_config(path) if path else {}
        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value
        unknown = sorted(set(raw) - set(RunConfigSerializer().fields))
        if unknown:
            raise ValidationError({key: ["Unknown configuration key."] for key in unknown})
        serializer = RunConfigSerializer(data=raw)
        serializer.is_valid(raise_exception=True)
        config = cls(serializer.validated_data)
        logger.debug(f"Loaded run config {config.config_hash()} from {path or 'defaults'}")
        return config

    @classmethod
    def defaults(cls) -> 'RunConfig':
        return cls.load()

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name)

    def replace(self, **changes) -> 'RunConfig':
        values = self.to_dict()
        values.update(changes)
        serializer = RunConfigSerializer(data=values)
        serializer.is_valid(raise_exception=True)
        return RunConfig(serializer.validated_data)

    def to_dict(self) -> Dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self._values.items()}

    def config_hash(self, exclude=('threads',)) -> str:
        """md5 of the canonical sorted JSON, ignoring keys that cannot change results"""
        payload = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.md5(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    @property
    def base_size(self):
        """(height, width) of the base image before cropping"""
        return self.image_height + 2 * self.crop_margin, self.image_width + 2 * self.crop_margin

    def constraint_spec(self) -> ConstraintSpec:
        area = float(self.image_height * self.image_width)
        upper = self.beta2_plus or area
        if self.mixture == 'three_component':
            return ConstraintSpec(bounds=((self.sigma1, self.sigma1), (self.beta2_minus, upper),
                                          (upper, upper)))
        if self.mixture == 'unconstrained':
            return ConstraintSpec.unconstrained(2, self.sigma1, upper)
        return ConstraintSpec(bounds=((self.sigma1, self.sigma1), (self.beta2_minus, upper)))

    def perturbation_spec(self) -> PerturbationSpec:
        return PerturbationSpec(
            count=self.perturbation_count,
            elastic_sigma=self.elastic_sigma,
            elastic_alpha=self.elastic_alpha,
            mask_std_range=(self.mask_std_min, self.mask_std_max),
        )

    def homography_spec(self) -> HomographySpec:
        height, width = self.base_size
        return HomographySpec(width=width, height=height, jitter=self.homography_jitter)

    def affine_spec(self) -> AffineSpec:
        return AffineSpec(
            max_rotation_deg=self.object_max_rotation,
            scale_range=(self.object_scale_min, self.object_scale_max),
            max_shear=self.object_max_shear,
            max_translation=self.object_max_translation,
        )

    def object_spec(self) -> ObjectSpec:
        return ObjectSpec(
            count=self.object_count,
            insert_probability=self.object_probability,
            radius_range=(self.object_radius_min, self.object_radius_max),
            motion=self.affine_spec(),
            reference_only_probability=self.reference_only_probability,
            query_only_probability=self.query_only_probability,
        )
