import enum
from django.db import models

# --- Enums for Choices ---

class CommandEnum(enum.Enum):
    PHANTOM = 'phantom'
    CONTRAST = 'contrast'
    AUGMENT = 'augment'
    TRAIN = 'train'
    PREDICT = 'predict'
    EVAL = 'eval'
    SLICE2D = 'slice2d'
    EXPERIMENT = 'experiment'

    @classmethod
    def choices(cls):
        return [(key.name, key.value) for key in cls]

class RunStatusEnum(enum.Enum):
    PENDING = 'Pending'
    PROCESSING = 'Processing'
    COMPLETED = 'Completed'
    FAILED = 'Failed'

    @classmethod
    def choices(cls):
        return [(key.name, key.value) for key in cls]

class MatrixEnum(enum.Enum):
    MODALITIES = 'Input modality combinations'
    AUGMENTATION = 'Augmentation on/off'
    AXES = '2D slicing axes'

    @classmethod
    def choices(cls):
        return [(key.name, key.value) for key in cls]

class RunEventTypeEnum(enum.Enum):
    RUN_STARTED = 'Run Started'
    RUN_COMPLETED = 'Run Completed'
    RUN_FAILED = 'Run Failed'
    CHECKPOINT_WRITTEN = 'Checkpoint Written'
    CELL_COMPLETED = 'Experiment Cell Completed'
    CELL_FAILED = 'Experiment Cell Failed'

    @classmethod
    def choices(cls):
        return [(key.name, key.value) for key in cls]

# --- Models ---

class Run(models.Model):
    command = models.CharField(max_length=20, choices=CommandEnum.choices())
    config_hash = models.CharField(max_length=64, db_index=True)
    config_text = models.TextField(help_text="Canonical `key = value` rendering of the validated RunConfig.")
    run_dir = models.CharField(max_length=1024, unique=True)
    seed = models.BigIntegerField(default=0)
    status = models.CharField(max_length=10, choices=RunStatusEnum.choices(), default=RunStatusEnum.PENDING.name)
    manifest = models.JSONField(default=dict, help_text="Every file the run emitted, relative to run_dir.")
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.command} {self.config_hash[:12]} ({self.status})"

class ExperimentCell(models.Model):
    run = models.ForeignKey(Run, on_delete=models.CASCADE, related_name='cells')
    matrix = models.CharField(max_length=20, choices=MatrixEnum.choices())
    label = models.CharField(max_length=100)
    settings = models.JSONField(default=dict, help_text="RunConfig overrides of this cell, e.g., {'modalities': 'opp,wat'}")
    status = models.CharField(max_length=10, choices=RunStatusEnum.choices(), default=RunStatusEnum.PENDING.name)
    mean_dice = models.FloatField(null=True, blank=True)
    sd_dice = models.FloatField(null=True, blank=True)
    mean_hd = models.FloatField(null=True, blank=True)
    sd_hd = models.FloatField(null=True, blank=True)
    wall_time = models.FloatField(null=True, blank=True, help_text="Seconds.")
    error = models.TextField(blank=True, default='')

    class Meta:
        ordering = ['id']

    def __str__(self):
        return f"{self.matrix}/{self.label} ({self.status})"

class RunEvent(models.Model):
    run = models.ForeignKey(Run, on_delete=models.CASCADE, related_name='events')
    event_type = models.CharField(max_length=30, choices=RunEventTypeEnum.choices())
    details = models.JSONField(default=dict, help_text="Details of the event, e.g., {'file': 'best.mck'}")
    timestamp = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-timestamp']

    def __str__(self):
        return f"{self.event_type} for run {self.run_id} at {self.timestamp}"
