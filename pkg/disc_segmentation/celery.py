import os
from celery import Celery

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'disc_segmentation.settings')
app = Celery('disc_segmentation')
app.config_from_object('django.conf:settings', namespace='CELERY')
app.autodiscover_tasks()
