from django.conf import settings
from rest_framework import serializers

from segmentation.volume import AXES, MODALITIES
from .models import ExperimentCell

DEFAULTS = settings.SEGMENTATION_DEFAULTS


class ModalityListField(serializers.Field):
    """Comma separated Dixon modality names, kept in canonical order."""

    default_error_messages = {
        'empty': 'Select at least one modality.',
        'unknown': 'Unknown modalities: {names}.',
    }

    def to_internal_value(self, data):
        names = [part.strip() for part in str(data).split(',') if part.strip()]
        if not names:
            self.fail('empty')
        unknown = sorted(set(names) - set(MODALITIES))
        if unknown:
            self.fail('unknown', names=', '.join(unknown))
        return tuple(name for name in MODALITIES if name in names)

    def to_representation(self, value):
        return ','.join(value)


class TripleField(serializers.Field):
    """Three comma separated numbers, e.g. dims `36,128,128`."""

    default_error_messages = {'invalid': 'Expected three comma separated positive numbers.'}

    def __init__(self, cast=int, **kwargs):
        self.cast = cast
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        parts = data if isinstance(data, (list, tuple)) else str(data).split(',')
        try:
            values = tuple(self.cast(str(part).strip()) for part in parts)
        except ValueError:
            self.fail('invalid')
        if len(values) != 3 or any(v <= 0 for v in values):
            self.fail('invalid')
        return values

    def to_representation(self, value):
        return ','.join(str(v) for v in value)


class RunConfigSerializer(serializers.Serializer):
    """
    Validates a RunConfig. Every key is a field with a default; the
    help_text of each field is its documentation.
    """

    # Data
    modalities = ModalityListField(default=('fat', 'opp', 'wat'), help_text="Input modalities, comma separated subset of fat,inn,opp,wat.")
    dataset = serializers.CharField(default='', allow_blank=True, help_text="Dataset directory with a manifest.json; empty generates the phantom from the phantom_* keys.")
    run_root = serializers.CharField(default='', allow_blank=True, help_text="Directory that receives run directories; empty uses SEGMENTATION_RUN_ROOT.")
    seed = serializers.IntegerField(default=0, min_value=0, help_text="Single source of all randomness.")
    mode = serializers.ChoiceField(choices=['reproducible', 'fast'], default='reproducible', help_text="`fast` batches inference passes and may differ by ~1e-5 relative.")

    # Phantom
    phantom_samples = serializers.IntegerField(default=DEFAULTS['phantom_samples'], min_value=1, help_text="Number of phantom samples.")
    phantom_validation = serializers.IntegerField(default=DEFAULTS['phantom_validation'], min_value=0, help_text="Samples held out for validation (the last ones).")
    phantom_dims = TripleField(default=DEFAULTS['phantom_dims'], help_text="Phantom grid nz,ny,nx.")
    phantom_discs = serializers.IntegerField(default=DEFAULTS['phantom_discs'], min_value=1, help_text="Discs per phantom.")
    phantom_semi_axes = TripleField(cast=float, default=(9.0, 3.5, 13.0), help_text="Disc semi-axes in voxels (z,y,x).")
    phantom_noise = serializers.FloatField(default=0.2, min_value=0.0, help_text="Noise sd as a fraction of each region mean.")
    phantom_amplitude = serializers.FloatField(default=6.0, min_value=0.0, help_text="Spine curve amplitude in voxels.")

    # Augmentation
    augment = serializers.BooleanField(default=True, help_text="Augment the training samples.")
    augment_copies = serializers.IntegerField(default=3, min_value=0, help_text="Augmented copies per training sample.")
    augment_translate = serializers.FloatField(default=DEFAULTS['augment_translate'], min_value=0.0, help_text="Max translation in voxels per axis.")
    augment_rotate = serializers.FloatField(default=DEFAULTS['augment_rotate'], min_value=0.0, help_text="Max rotation in degrees per axis.")
    augment_scale_min = serializers.FloatField(default=DEFAULTS['augment_scale'][0], min_value=0.01, help_text="Lower scale factor bound.")
    augment_scale_max = serializers.FloatField(default=DEFAULTS['augment_scale'][1], min_value=0.01, help_text="Upper scale factor bound.")
    elastic_delta = serializers.FloatField(default=DEFAULTS['elastic_delta'], help_text="Gaussian sd of the elastic field in voxels.")
    elastic_alpha = serializers.FloatField(default=DEFAULTS['elastic_alpha'], min_value=0.0, help_text="Elastic field scaling factor.")

    # Training
    lr = serializers.FloatField(default=DEFAULTS['lr'], help_text="Adam learning rate.")
    batch_size_3d = serializers.IntegerField(default=1, min_value=1, help_text="Batch size of the 3D networks.")
    batch_size_2d = serializers.IntegerField(default=16, min_value=1, help_text="Batch size of the 2D network.")
    max_epochs = serializers.IntegerField(default=100, min_value=1, help_text="Maximum number of training epochs.")
    patience = serializers.IntegerField(default=10, min_value=0, help_text="Non-improving epochs tolerated before stopping.")
    dropout = serializers.FloatField(default=DEFAULTS['dropout'], min_value=0.0, help_text="Dropout rate of the 3D networks.")
    smoothing = serializers.FloatField(default=1.0, min_value=0.0, help_text="Dice loss smoothing term S.")
    base_channels = serializers.IntegerField(default=32, min_value=1, help_text="First-level channels of the 3D networks.")
    base_channels_2d = serializers.IntegerField(default=64, min_value=1, help_text="First-level channels of the 2D network.")
    localizer_downsample = serializers.IntegerField(default=2, min_value=1, help_text="Per-axis downsampling of localizer inputs.")

    # Pipeline
    min_region_voxels = serializers.IntegerField(default=DEFAULTS['min_region_voxels'], min_value=0, help_text="Smallest component kept after localization.")
    threshold = serializers.FloatField(default=DEFAULTS['threshold'], help_text="Probability threshold.")

    # 2D path
    slice_axis = serializers.ChoiceField(choices=sorted(AXES), default='y', help_text="Axis the 2D path slices along.")
    slice_size = serializers.IntegerField(default=256, min_value=16, help_text="Slices are zero-padded to slice_size x slice_size.")

    def to_internal_value(self, data):
        unknown = sorted(set(data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({key: ['Unknown configuration key.'] for key in unknown})
        return super().to_internal_value(data)

    def validate_lr(self, value):
        if not value > 0:
            raise serializers.ValidationError('Must be positive.')
        return value

    def validate_elastic_delta(self, value):
        if not value > 0:
            raise serializers.ValidationError('Must be positive.')
        return value

    def validate_threshold(self, value):
        if not 0 < value < 1:
            raise serializers.ValidationError('Must lie within (0, 1).')
        return value

    def validate_dropout(self, value):
        if value >= 1:
            raise serializers.ValidationError('Must be below 1.')
        return value

    def validate_slice_size(self, value):
        if value % 16:
            raise serializers.ValidationError('Must be a multiple of 16.')
        return value

    def validate(self, data):
        if data['augment_scale_min'] > data['augment_scale_max']:
            raise serializers.ValidationError({'augment_scale_min': ['Must not exceed augment_scale_max.']})
        if data['phantom_validation'] >= data['phantom_samples']:
            raise serializers.ValidationError({'phantom_validation': ['Must be smaller than phantom_samples.']})
        return data


class ExperimentCellSerializer(serializers.ModelSerializer):
    matrix = serializers.CharField(source='get_matrix_display')
    config = serializers.CharField(source='label')
    status = serializers.CharField(source='get_status_display')

    class Meta:
        model = ExperimentCell
        fields = ['matrix', 'config', 'status', 'mean_dice', 'sd_dice', 'mean_hd', 'sd_hd', 'wall_time', 'error']
