"""
Django settings for disc_segmentation project.

The project hosts no web surface: it is a library app (`segmentation`) plus an
operator app (`experiments`) whose management commands drive the two-stage
disc segmentation workflows.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'django-insecure-disc-segmentation-local-key')

DEBUG = os.environ.get('DJANGO_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    # Project apps
    'segmentation',
    'experiments',
]


# Database
# Run bookkeeping only; volumes and checkpoints live on disk under the run root.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

LOG_LEVEL = os.environ.get('SEGMENTATION_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'segmentation': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
        'experiments': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
    },
}


# Segmentation workflows

SEGMENTATION_RUN_ROOT = Path(os.environ.get('SEGMENTATION_RUN_ROOT', BASE_DIR / 'runs'))

# Defaults shared by the RunConfig serializer and the library entry points.
SEGMENTATION_DEFAULTS = {
    'phantom_dims': (36, 128, 128),
    'phantom_discs': 7,
    'phantom_samples': 8,
    'phantom_validation': 2,
    'elastic_delta': 4.0,
    'elastic_alpha': 8.0,
    'augment_translate': 5.0,
    'augment_rotate': 10.0,
    'augment_scale': (0.9, 1.1),
    'lr': 1e-5,
    'dropout': 0.2,
    'min_region_voxels': 100,
    'threshold': 0.5,
}


# Celery

CELERY_BROKER_URL = os.environ.get('CELERY_BROKER_URL', 'redis://localhost:6379/0')
CELERY_RESULT_BACKEND = os.environ.get('CELERY_RESULT_BACKEND', 'redis://localhost:6379/0')
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TASK_ALWAYS_EAGER = os.environ.get('CELERY_TASK_ALWAYS_EAGER', '0') == '1'
CELERY_TASK_EAGER_PROPAGATES = False
