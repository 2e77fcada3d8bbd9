from rest_framework import serializers


class FloatListField(serializers.Field):
    """Comma-separated floats ("0.32,0.08") or a list, stored as a tuple"""

    def __init__(self, *args, min_length=1, max_length=None, **kwargs):
        self.min_length = min_length
        self.max_length = max_length
        super().__init__(*args, **kwargs)

    def to_internal_value(self, data):
        if isinstance(data, str):
            items = [item.strip() for item in data.split(',') if item.strip()]
        elif isinstance(data, (list, tuple)):
            items = list(data)
        else:
            raise serializers.ValidationError("Expected a comma-separated list of numbers.")
        try:
            values = tuple(float(item) for item in items)
        except (TypeError, ValueError):
            raise serializers.ValidationError(f"Not a list of numbers: {data!r}.")
        if len(values) < self.min_length:
            raise serializers.ValidationError(f"Expected at least {self.min_length} values.")
        if self.max_length is not None and len(values) > self.max_length:
            raise serializers.ValidationError(f"Expected at most {self.max_length} values.")
        return values

    def to_representation(self, value):
        return ','.join(format(v, 'g') for v in value)


class IntListField(FloatListField):
    """Comma-separated positive integers"""

    def to_internal_value(self, data):
        values = super().to_internal_value(data)
        if any(v != int(v) or v <= 0 for v in values):
            raise serializers.ValidationError("Expected positive integers.")
        return tuple(int(v) for v in values)


class RunConfigSerializer(serializers.Serializer):
    """Validates and defaults a run configuration (file values merged with flag overrides)"""

    # general
    seed = serializers.IntegerField(min_value=0, default=0)
    threads = serializers.IntegerField(min_value=0, default=0)

    # sample geometry
    image_height = serializers.IntegerField(min_value=8, default=64)
    image_width = serializers.IntegerField(min_value=8, default=64)
    crop_margin = serializers.IntegerField(min_value=0, default=16)
    homography_jitter = serializers.FloatField(min_value=0.0, max_value=0.45, default=0.12)
    base_image_dir = serializers.CharField(allow_blank=True, default='')
    num_samples = serializers.IntegerField(min_value=0, default=100)

    # local perturbations
    perturbation_count = serializers.IntegerField(min_value=0, default=3)
    elastic_sigma = serializers.FloatField(min_value=0.0, default=4.0)
    elastic_alpha = serializers.FloatField(min_value=0.0, default=3.0)
    mask_std_min = serializers.FloatField(min_value=1e-3, default=2.0)
    mask_std_max = serializers.FloatField(min_value=1e-3, default=6.0)

    # independently moving objects
    object_count = serializers.IntegerField(min_value=0, default=4)
    object_probability = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.8)
    object_radius_min = serializers.FloatField(min_value=1.0, default=4.0)
    object_radius_max = serializers.FloatField(min_value=1.0, default=12.0)
    object_max_translation = serializers.FloatField(min_value=0.0, default=6.0)
    object_max_rotation = serializers.FloatField(min_value=0.0, max_value=180.0, default=15.0)
    object_scale_min = serializers.FloatField(min_value=0.1, default=0.9)
    object_scale_max = serializers.FloatField(min_value=0.1, default=1.1)
    object_max_shear = serializers.FloatField(min_value=0.0, default=0.05)
    reference_only_probability = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.1)
    query_only_probability = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.1)

    # mixture constraints (variances in px^2; beta2_plus=0 means H*W)
    mixture = serializers.ChoiceField(
        choices=['default', 'three_component', 'unconstrained'], default='default'
    )
    sigma1 = serializers.FloatField(min_value=1.0, default=1.0)
    beta2_minus = serializers.FloatField(min_value=1.0, default=2.0)
    beta2_plus = serializers.FloatField(min_value=0.0, default=0.0)

    # training (training_mask picks the pixels excluded from the loss)
    training_mask = serializers.ChoiceField(
        choices=['injective', 'occlusion', 'none'], default='injective'
    )
    loss_weights = FloatListField(min_length=2, max_length=2, default=(0.32, 0.08))
    weight_decay = serializers.FloatField(min_value=0.0, default=4e-4)
    learning_rate = serializers.FloatField(min_value=0.0, default=1e-3)
    lr_milestones = FloatListField(min_length=0, default=(0.6, 0.85))
    iterations = serializers.IntegerField(min_value=0, default=5000)
    batch_size = serializers.IntegerField(min_value=1, default=8)
    val_fraction = serializers.FloatField(min_value=0.0, max_value=0.5, default=0.1)
    checkpoint_every = serializers.IntegerField(min_value=0, default=1000)
    log_every = serializers.IntegerField(min_value=1, default=50)

    # architecture
    feature_channels = serializers.IntegerField(min_value=1, default=16)
    flow_widths = IntListField(min_length=2, max_length=2, default=(64, 32))
    cum_hidden = serializers.IntegerField(min_value=1, default=8)
    cum_out = serializers.IntegerField(min_value=1, default=8)
    predictor_widths = IntListField(min_length=2, max_length=2, default=(32, 16))
    search_radius = serializers.IntegerField(min_value=1, max_value=8, default=4)
    softargmax_temperature = serializers.FloatField(min_value=0.0, default=15.0)

    # inference and evaluation
    gamma = serializers.FloatField(min_value=0.0, default=0.1)
    radius = serializers.FloatField(default=1.0)
    ransac_iters = serializers.IntegerField(min_value=1, default=2000)
    inlier_threshold = serializers.FloatField(default=1.0)
    ms_ratios = FloatListField(default=(0.5, 0.88, 1.0, 1.33, 1.66, 2.0))
    keypoint_distance = serializers.FloatField(default=4.0)
    cyclic_threshold = serializers.FloatField(default=2.0)
    sparsification_steps = serializers.IntegerField(min_value=2, default=50)
    pck_thresholds = FloatListField(default=(1.0, 3.0, 5.0))

    def validate_image_height(self, value):
        if value % 8:
            raise serializers.ValidationError("Image height must be divisible by 8.")
        return value

    def validate_image_width(self, value):
        if value % 8:
            raise serializers.ValidationError("Image width must be divisible by 8.")
        return value

    def validate_gamma(self, value):
        if value >= 1.0:
            raise serializers.ValidationError("gamma must lie in [0, 1).")
        return value

    def validate_radius(self, value):
        if value <= 0:
            raise serializers.ValidationError("radius must be positive.")
        return value

    def validate_inlier_threshold(self, value):
        if value <= 0:
            raise serializers.ValidationError("inlier_threshold must be positive.")
        return value

    def validate_keypoint_distance(self, value):
        if value <= 0:
            raise serializers.ValidationError("keypoint_distance must be positive.")
        return value

    def validate_cyclic_threshold(self, value):
        if value <= 0:
            raise serializers.ValidationError("cyclic_threshold must be positive.")
        return value

    def validate_ms_ratios(self, value):
        if any(r <= 0 for r in value):
            raise serializers.ValidationError("Scale ratios must be positive.")
        return value

    def validate_loss_weights(self, value):
        if any(w < 0 for w in value):
            raise serializers.ValidationError("Loss weights must be non-negative.")
        return value

    def validate_lr_milestones(self, value):
        if any(not 0.0 < m < 1.0 for m in value) or list(value) != sorted(value):
            raise serializers.ValidationError("Milestones must be increasing fractions in (0, 1).")
        return value

    def validate_pck_thresholds(self, value):
        if any(t <= 0 for t in value):
            raise serializers.ValidationError("PCK thresholds must be positive.")
        return value

    def validate(self, data):
        if data['mask_std_min'] > data['mask_std_max']:
            raise serializers.ValidationError("mask_std_min exceeds mask_std_max.")
        if data['object_radius_min'] > data['object_radius_max']:
            raise serializers.ValidationError("object_radius_min exceeds object_radius_max.")
        if data['object_scale_min'] > data['object_scale_max']:
            raise serializers.ValidationError("object_scale_min exceeds object_scale_max.")
        if data['reference_only_probability'] + data['query_only_probability'] > 1.0:
            raise serializers.ValidationError("Presence probabilities exceed 1.")
        if data['beta2_plus'] and data['beta2_plus'] < data['beta2_minus']:
            raise serializers.ValidationError("beta2_plus must be 0 (H*W) or >= beta2_minus.")
        return data
