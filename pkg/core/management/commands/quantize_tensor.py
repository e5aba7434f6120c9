"""
Commande de débogage des codecs : quantifie un tenseur QDT1

Usage: python manage.py quantize_tensor x.qdt --format nvfp4 --out x.qdq
"""

import logging

import numpy as np

from core.commands import EXIT_CONFIG, EngineCommand
from core.exceptions import ConfigError
from core.metrics import rel_l2
from core.quant_formats import QuantFormat, dequantize, quantize, write_quantized
from core.tensors import DTYPE_F16, read_tensor, write_tensor
from core.utils import format_float
from django.core.management.base import CommandError

logger = logging.getLogger(__name__)

FORMATS = tuple(f.value for f in QuantFormat if f is not QuantFormat.IDENTITY)


class Command(EngineCommand):
    help = "Quantifie un tenseur QDT1 et affiche l'erreur d'aller-retour"
    uses_config = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('input', help="Tenseur QDT1 d'entrée")
        parser.add_argument('--format', dest='format', required=True, help=', '.join(FORMATS))
        parser.add_argument('--block-size', dest='block_size', type=int,
                            help="Taille de groupe INT8 le long de la dernière dimension")

    def execute_engine(self, config, **options):
        fmt_name = options['format']
        if fmt_name not in FORMATS:
            raise CommandError(f"unknown format '{fmt_name}' (expected {', '.join(FORMATS)})",
                               returncode=EXIT_CONFIG)
        if not options.get('out'):
            raise ConfigError("--out is required")

        tensor = read_tensor(options['input'])
        fmt = QuantFormat(fmt_name)
        quantized = quantize(tensor, fmt, options.get('block_size'))
        restored = dequantize(quantized)

        if fmt is QuantFormat.FP16_PASSTHROUGH:
            write_tensor(options['out'], quantized.codes, DTYPE_F16)
        else:
            write_quantized(options['out'], quantized)

        error = rel_l2(tensor, restored) if np.any(tensor) else 0.0
        self.stdout.write(f"format = {fmt.value}")
        self.stdout.write(f"rel_l2 = {format_float(error)}")
        if fmt is QuantFormat.NVFP4:
            scales = quantized.effective_scales
            self.stdout.write(f"n_blocks = {scales.size}")
            self.stdout.write(f"global_scale = {format_float(quantized.global_scale)}")
            self.stdout.write(f"block_scale_min = {format_float(scales.min())}")
            self.stdout.write(f"block_scale_max = {format_float(scales.max())}")
            self.stdout.write(f"block_scale_mean = {format_float(scales.mean())}")
        logger.info(f"Tenseur quantifié ({fmt.value}) écrit dans {options['out']}")
