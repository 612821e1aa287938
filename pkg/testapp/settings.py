from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = 'secret_key'

DEBUG = True

INSTALLED_APPS = [
    'hmlet',
    'testapp',
]

# hmlet keeps no state in a database
DATABASES = {}

USE_TZ = True

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
        },
    },
    'loggers': {
        'hmlet': {
            'handlers': ['console'],
            'level': 'WARNING',
        },
    },
}

HMLET_DEFAULTS = {
    'dim': 16,
    'batch_size': 512,
    'max_epochs': 5,
}

HMLET_EVAL_CHUNK_SIZE = 64
