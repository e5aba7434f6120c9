"""
Agrégats recalculés depuis une trace seule

Usage: python manage.py report runs/exp/trace.tsv
"""

from analytics.reports import render_summary, summarize
from analytics.trace import read_trace
from core.commands import EngineCommand
from core.utils import atomic_write_text


class Command(EngineCommand):
    help = "Largeur de bits moyenne, histogramme des formats et séries de sauts d'une trace"
    uses_config = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('trace', help="Fichier trace.tsv")

    def execute_engine(self, config, **options):
        lines = render_summary(summarize(read_trace(options['trace'])))
        for line in lines:
            self.stdout.write(line)
        if options.get('out'):
            atomic_write_text(options['out'], '\n'.join(lines) + '\n')
