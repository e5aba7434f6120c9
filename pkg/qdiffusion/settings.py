"""
Configuration Django pour QDiffusion

Ce fichier contient la configuration au niveau du processus :
- Applications installées (core, ai_engine, analytics)
- Parallélisme des exécutions indépendantes (QDE_THREADS)
- Logging et monitoring

Les paramètres d'expérience (seuils, modèle jouet, ordonnanceur) ne sont PAS
ici : ils vivent dans le fichier de configuration "clé = valeur" lu par
core.config et recopié dans chaque rapport.
"""

import os
from pathlib import Path

from decouple import config
import sentry_sdk
from sentry_sdk.integrations.django import DjangoIntegration

# =============================================================================
# CONFIGURATION DE BASE
# =============================================================================

BASE_DIR = Path(__file__).resolve().parent.parent

DEBUG = config('DEBUG', default=False, cast=bool)

# Aucune requête HTTP n'est servie ; la clé ne sert qu'à satisfaire Django
SECRET_KEY = config('SECRET_KEY', default='qdiffusion-cli-only')

ALLOWED_HOSTS = []

# =============================================================================
# APPLICATIONS
# =============================================================================

INSTALLED_APPS = [
    'core',
    'ai_engine',
    'analytics',
]

# Pas de base de données : toutes les commandes travaillent sur des fichiers
DATABASES = {}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

USE_TZ = True

# =============================================================================
# MOTEUR DE SIMULATION
# =============================================================================

# Nombre maximal de workers pour les exécutions indépendantes (graines, balayages)
QDE_THREADS = config('QDE_THREADS', default=os.cpu_count() or 1, cast=int)

# =============================================================================
# CONFIGURATION DU LOGGING
# =============================================================================

QDE_LOG_LEVEL = config('QDE_LOG_LEVEL', default='INFO')
QDE_LOG_FILE = config('QDE_LOG_FILE', default='')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        'core': {
            'handlers': ['console'],
            'level': QDE_LOG_LEVEL,
            'propagate': False,
        },
        'ai_engine': {
            'handlers': ['console'],
            'level': QDE_LOG_LEVEL,
            'propagate': False,
        },
        'analytics': {
            'handlers': ['console'],
            'level': QDE_LOG_LEVEL,
            'propagate': False,
        },
    },
}

# Fichier de log optionnel, en plus de la console
if QDE_LOG_FILE:
    LOGGING['handlers']['file'] = {
        'level': 'INFO',
        'class': 'logging.FileHandler',
        'filename': QDE_LOG_FILE,
        'formatter': 'verbose',
    }
    for _name in ('core', 'ai_engine', 'analytics'):
        LOGGING['loggers'][_name]['handlers'].append('file')

# =============================================================================
# CONFIGURATION SENTRY (MONITORING)
# =============================================================================

SENTRY_DSN = config('SENTRY_DSN', default='')

if SENTRY_DSN:
    sentry_sdk.init(
        dsn=SENTRY_DSN,
        integrations=[DjangoIntegration()],
        traces_sample_rate=0.0,
        send_default_pii=False,
    )
