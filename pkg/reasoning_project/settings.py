"""
Django settings for reasoning_project project.
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('SECRET_KEY', 'django-insecure-reasoning-pipeline-local-key')

DEBUG = os.environ.get('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = os.environ.get('ALLOWED_HOSTS', 'localhost').split(',')

# Application definition
INSTALLED_APPS = [
    'rest_framework',
    'problem_bank',
    'llm_gateway',
    'verifier',
    'curation',
    'trajectory_search',
    'sft_synthesis',
    'rl_reward',
    'pipeline',
]

# The pipeline keeps its state in run directories (JSON-lines), not in a database.
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}

# Pipeline defaults; a run's TOML config overrides these per run.
PIPELINE = {
    'PROMPT_DIR': Path(os.environ.get('PIPELINE_PROMPT_DIR', BASE_DIR / 'prompts')),
    'JUDGE_TEMPERATURE': 0.0,
    'GENERATION_TEMPERATURE': 0.7,
    'MAX_OUTPUT_TOKENS': int(os.environ.get('PIPELINE_MAX_OUTPUT_TOKENS', '2048')),
    'REQUEST_TIMEOUT': float(os.environ.get('PIPELINE_REQUEST_TIMEOUT', '60')),
    'RETRY_ATTEMPTS': int(os.environ.get('PIPELINE_RETRY_ATTEMPTS', '4')),
    'RETRY_BACKOFF': float(os.environ.get('PIPELINE_RETRY_BACKOFF', '1.0')),
    'RETRY_BACKOFF_MAX': 30.0,
    'REQUESTS_PER_MINUTE': float(os.environ.get('PIPELINE_REQUESTS_PER_MINUTE', '60')),
    'AUDIT_TRUNCATE': 500,
    'TOKEN_COUNTER': os.environ.get('PIPELINE_TOKEN_COUNTER', 'sft_synthesis.tokens.whitespace_tokens'),
    'WORKERS': int(os.environ.get('PIPELINE_WORKERS', '4')),
    # Curation
    'MIN_QUESTION_CHARS': 120,
    'JUDGE_RETRIES': 2,
    'REFORMAT_RETRIES': 2,
    # Stage one search (N and T)
    'MAX_DEPTH': 3,
    'MAX_ATTEMPTS': 3,
    'FORMAT_RETRIES': 2,
    # Synthesis
    'SYNTHESIS_RETRIES': 2,
    # Decontamination
    'DECONTAMINATION_WINDOW': 64,
}

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
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': os.environ.get('PIPELINE_LOG_LEVEL', 'INFO'),
            'propagate': False,
        }
        for app in (
            'problem_bank',
            'llm_gateway',
            'verifier',
            'curation',
            'trajectory_search',
            'sft_synthesis',
            'rl_reward',
            'pipeline',
        )
    },
}
