# experiments/runconfig.py
"""
RunConfig: line-oriented ``key = value`` text. Blank lines and ``#``
comments are ignored. The validated config renders back canonically
(every key, sorted) and the SHA-256 of that text is the config hash.
"""

import hashlib
import logging
from pathlib import Path

from django.conf import settings

from segmentation.augment import AugmentBounds
from segmentation.exceptions import ConfigError
from segmentation.phantom import PhantomConfig
from segmentation.pipeline import PipelineConfig
from segmentation.unet import TrainConfig
from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)


def parse_config_text(text):
    """-> {key: raw string value}; malformed lines and duplicate keys raise ConfigError."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"Line {number} is not `key = value`: {raw.strip()!r}.", field=f"line {number}")
        if key in values:
            raise ConfigError(f"Key {key!r} is set twice (line {number}).", field=key)
        values[key] = value.strip()
    return values


def _render_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ','.join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """A validated, immutable RunConfig; keys are readable as attributes."""

    def __init__(self, values):
        object.__setattr__(self, '_values', dict(values))

    @classmethod
    def from_dict(cls, raw):
        serializer = RunConfigSerializer(data=raw)
        if not serializer.is_valid():
            key, messages = next(iter(sorted(serializer.errors.items())))
            message = messages[0] if isinstance(messages, list) else messages
            raise ConfigError(f"Config key {key!r}: {message}", field=key)
        return cls(serializer.validated_data)

    @classmethod
    def from_text(cls, text):
        return cls.from_dict(parse_config_text(text))

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file {path} does not exist.", field='config')
        return cls.from_text(path.read_text())

    @classmethod
    def defaults(cls):
        return cls.from_dict({})

    def __getattr__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key) from None

    def __setattr__(self, key, value):
        raise AttributeError('RunConfig is immutable; use override().')

    def as_dict(self):
        return dict(self._values)

    def override(self, **changes):
        """A new config with `changes` (raw or typed values) re-validated."""
        raw = {key: _render_value(value) for key, value in self._values.items()}
        raw.update({key: _render_value(value) for key, value in changes.items()})
        return RunConfig.from_dict(raw)

    @property
    def text(self):
        return ''.join(f"{key} = {_render_value(self._values[key])}\n" for key in sorted(self._values))

    @property
    def hash(self):
        return hashlib.sha256(self.text.encode('utf-8')).hexdigest()

    @property
    def root(self):
        return Path(self.run_root) if self.run_root else Path(settings.SEGMENTATION_RUN_ROOT)

    # --- Library configs ---

    def phantom(self):
        return PhantomConfig(
            dims=self.phantom_dims,
            discs=self.phantom_discs,
            semi_axes=self.phantom_semi_axes,
            amplitude=self.phantom_amplitude,
            noise=self.phantom_noise,
            seed=self.seed,
        )

    def augment_bounds(self):
        return AugmentBounds(
            translate=self.augment_translate,
            rotate=self.augment_rotate,
            scale=(self.augment_scale_min, self.augment_scale_max),
            delta=self.elastic_delta,
            alpha=self.elastic_alpha,
        )

    def train(self, dims=3, checkpoint_dir=None):
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size_3d if dims == 3 else self.batch_size_2d,
            max_epochs=self.max_epochs,
            patience=self.patience,
            dropout=self.dropout,
            smoothing=self.smoothing,
            seed=self.seed,
            mode=self.mode,
            checkpoint_dir=str(checkpoint_dir) if checkpoint_dir is not None else None,
        )

    def pipeline(self):
        return PipelineConfig(
            modalities=self.modalities,
            min_region_voxels=self.min_region_voxels,
            threshold=self.threshold,
            localizer_downsample=self.localizer_downsample,
            stacked=self.mode == 'fast',
        )


def load_run_config(path=None, overrides=None):
    """Config file (or defaults) with `KEY=VALUE` command-line overrides applied."""
    if path and not Path(path).is_file():
        raise ConfigError(f"Config file {path} does not exist.", field='config')
    raw = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides or []:
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"Override {item!r} is not KEY=VALUE.", field='set')
        raw[key.strip()] = value.strip()
    config = RunConfig.from_dict(raw)
    logger.debug("Loaded config %s", config.hash[:12])
    return config
