"""
Table d'ablation sur plusieurs graines

Usage: python manage.py ablate --config exp.cfg --predictors predictors.txt --seeds 0-9
"""

import logging

from ai_engine.ablation import format_ablation, run_ablation, write_ablation
from ai_engine.dmpq import read_predictors
from core.commands import EngineCommand, worker_count
from core.exceptions import ConfigError
from core.utils import parse_int_list

logger = logging.getLogger(__name__)


class Command(EngineCommand):
    help = "Compare w4a4, w4a8, dmpq, tdc, dmpq_tdc et full sur les graines d'ablation"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--predictors', required=True, help="Fichier produit par 'calibrate'")
        parser.add_argument('--seeds', help="Graines, ex. '0-9' ou '0,3,5' (défaut: ablation_seeds)")

    def execute_engine(self, config, **options):
        seeds = None
        if options.get('seeds'):
            try:
                seeds = parse_int_list(options['seeds'])
            except ValueError as e:
                raise ConfigError(f"invalid --seeds '{options['seeds']}': {e}") from e

        predictors = read_predictors(options['predictors'])
        rows = run_ablation(config, predictors, seeds, max_workers=worker_count())
        self.stdout.write(format_ablation(rows), ending='')
        if options.get('out'):
            write_ablation(options['out'], rows)
