from django.apps import AppConfig


class SegmentationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'segmentation'
    verbose_name = 'Disc segmentation library'
