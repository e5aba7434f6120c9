"""
Calibration des prédicteurs DMPQ

Usage: python manage.py calibrate --config exp.cfg --out predictors.txt
"""

import logging

from ai_engine.calibration import run_calibration
from ai_engine.dmpq import format_predictors, write_predictors
from core.commands import EngineCommand, worker_count

logger = logging.getLogger(__name__)

DEFAULT_OUT = 'predictors.txt'


class Command(EngineCommand):
    help = "Ajuste un prédicteur linéaire (α, β, τ_Γ) par couche sur les graines de calibration"

    def execute_engine(self, config, **options):
        out = options.get('out') or DEFAULT_OUT
        result = run_calibration(config, max_workers=worker_count())
        write_predictors(out, result.predictors)

        self.stdout.write(format_predictors(result.predictors), ending='')
        self.stdout.write(f"predictors = {len(result.predictors)}")
        self.stdout.write(f"pairs = {len(result.pairs)}")
        pinned = sum(1 for p in result.predictors if p.tau_gamma is None)
        if pinned:
            self.stdout.write(f"pinned_int8 = {pinned}")
        logger.info(f"Calibration terminée: {len(result.predictors)} couches -> {out}")
