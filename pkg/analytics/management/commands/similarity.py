"""
Similarité temporelle des deltas de blocs sur la trajectoire de référence

Usage: python manage.py similarity --config exp.cfg [--out similarity.tsv]
"""

from ai_engine.pipeline import run_reference
from ai_engine.toy_model import Schedule, ToyDiT, ToyModelSpec
from analytics.similarity import delta_similarity, format_similarity, smoothness_statistic
from core.commands import EngineCommand
from core.utils import atomic_write_text, format_float


class Command(EngineCommand):
    help = "Cosinus et écart L2 relatif entre Δ_t et Δ_{t−1} pour chaque bloc"

    def execute_engine(self, config, **options):
        model = ToyDiT(ToyModelSpec.from_config(config))
        reference = run_reference(model, Schedule.from_config(config), config.seed)
        rows = delta_similarity(reference)
        text = format_similarity(rows)
        if options.get('out'):
            atomic_write_text(options['out'], text)
        else:
            self.stdout.write(text, ending='')
        self.stdout.write(f"smoothness = {format_float(smoothness_statistic(reference))}")
