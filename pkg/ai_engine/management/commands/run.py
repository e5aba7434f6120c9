"""
Exécution quantifiée complète comparée à la référence

Usage: python manage.py run --config exp.cfg --predictors predictors.txt --out runs/exp
"""

import logging

from ai_engine.dmpq import read_predictors
from ai_engine.pipeline import execute_run
from analytics.reports import summary_line
from core.commands import EngineCommand

logger = logging.getLogger(__name__)


class Command(EngineCommand):
    help = "Exécute le pipeline DMPQ + TDC + PDR et écrit report.txt et trace.tsv"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--predictors', help="Fichier produit par 'calibrate' (requis en mode dmpq)")

    def execute_engine(self, config, **options):
        predictors = None
        if options.get('predictors'):
            predictors = read_predictors(options['predictors'])
        elif config.quant_mode == 'dmpq':
            logger.warning("Aucun fichier de prédicteurs fourni en mode dmpq")

        report = execute_run(config, predictors, out_dir=options.get('out'))
        self.stdout.write(summary_line(report))
