"""
Base commune des commandes de gestion du moteur

Les modules de calcul lèvent des EngineError ; cette base les traduit en
CommandError avec un code de sortie stable :

    2  configuration invalide, format inconnu
    3  régression dégénérée (la couche fautive est nommée)
    4  prédicteurs manquants
    5  trace vide ("no records")
    6  trace ou fichier tenseur mal formé
"""

from __future__ import annotations

import logging
from typing import Any

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from .config import EngineConfig, load_config
from .exceptions import (
    ConfigError,
    DegenerateFitError,
    EmptyTraceError,
    EngineError,
    MissingPredictorError,
    TensorFormatError,
    TraceFormatError,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DEGENERATE_FIT = 3
EXIT_MISSING_PREDICTORS = 4
EXIT_EMPTY_TRACE = 5
EXIT_MALFORMED_INPUT = 6

_EXIT_CODES = (
    (DegenerateFitError, EXIT_DEGENERATE_FIT),
    (MissingPredictorError, EXIT_MISSING_PREDICTORS),
    (EmptyTraceError, EXIT_EMPTY_TRACE),
    (TraceFormatError, EXIT_MALFORMED_INPUT),
    (TensorFormatError, EXIT_MALFORMED_INPUT),
    (ConfigError, EXIT_CONFIG),
)

ENGINE_LOGGERS = ('core', 'ai_engine', 'analytics')


def exit_code_for(error: EngineError) -> int:
    for error_type, code in _EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return EXIT_CONFIG


def worker_count() -> int:
    """Plafond de parallélisme pour les exécutions indépendantes (QDE_THREADS)"""
    return max(1, int(getattr(settings, 'QDE_THREADS', 1)))


class EngineCommand(BaseCommand):
    """Commande avec les options globales --config, --out, --seed, --verbose"""

    requires_system_checks = []
    uses_config = True

    def add_arguments(self, parser):
        if self.uses_config:
            parser.add_argument('--config', help="Fichier de configuration 'clé = valeur'")
            parser.add_argument('--seed', type=int, help="Remplace la graine de la configuration")
        parser.add_argument('--out', help="Fichier ou répertoire de sortie")
        parser.add_argument('--verbose', action='store_true', help="Logs DEBUG sur stderr")

    def handle(self, *args, **options):
        if options.get('verbose'):
            for name in ENGINE_LOGGERS:
                logging.getLogger(name).setLevel(logging.DEBUG)

        try:
            config = None
            config_path = options.pop('config', None)
            if self.uses_config:
                config = load_config(config_path)
                if options.get('seed') is not None:
                    config = config.with_overrides(seed=options['seed'])
            return self.execute_engine(config, **options)
        except EngineError as e:
            code = exit_code_for(e)
            logger.error(f"Erreur moteur ({type(e).__name__}): {e}")
            raise CommandError(str(e), returncode=code) from e

    def execute_engine(self, config: EngineConfig, **options: Any):
        raise NotImplementedError('subclasses of EngineCommand must provide execute_engine()')
