"""
Django settings for the uncertflow project.

The project has no web surface: Django provides the command framework
(``manage.py gendata|train|infer|eval|sparsify|match``), the settings and
logging layer, and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
from decouple import config
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


SECRET_KEY = config('SECRET_KEY', default='uncertflow-local-only-key')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',

    # Third party apps
    'rest_framework',

    # Local apps
    'correspondence',
]

# Commands never touch the database; SQLite keeps Django's checks satisfied.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Toolkit settings

# Worker pool size for per-pair work; 0 means one worker per logical core.
UNCERTFLOW_THREADS = config('UNCERTFLOW_THREADS', default=0, cast=int)

# Stages running longer than this are reported with a warning.
UNCERTFLOW_SLOW_STAGE_SECONDS = config('UNCERTFLOW_SLOW_STAGE_SECONDS', default=30.0, cast=float)

# Enables the desk-scale training trend test (takes tens of minutes).
UNCERTFLOW_SLOW_TESTS = config('UNCERTFLOW_SLOW_TESTS', default=False, cast=bool)

UNCERTFLOW_LOG_LEVEL = config('UNCERTFLOW_LOG_LEVEL', default='INFO')

# Logging configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': UNCERTFLOW_LOG_LEVEL,
            'class': 'logging.StreamHandler',
            'formatter': 'verbose' if DEBUG else 'simple',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'correspondence': {
            'handlers': ['console'],
            'level': UNCERTFLOW_LOG_LEVEL,
            'propagate': False,
        },
        'app': {
            'handlers': ['console'],
            'level': UNCERTFLOW_LOG_LEVEL,
            'propagate': False,
        },
    },
}

# Numerical libraries run single-threaded unless the caller sets OMP_NUM_THREADS.
os.environ.setdefault('OMP_NUM_THREADS', '1')
