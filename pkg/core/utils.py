"""
Utilitaires fichiers partagés par les commandes
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import List, Union

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Écrit `data` dans un fichier temporaire voisin puis le renomme.

    Un lecteur concurrent voit soit l'ancien fichier, soit le nouveau complet.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def parse_int_list(value: str) -> List[int]:
    """Parse "0,1,2" ou "0-3" (bornes incluses, entiers positifs) en liste d'entiers"""
    result: List[int] = []
    for chunk in value.split(','):
        chunk = chunk.strip()
        if not chunk:
            continue
        start, sep, stop = chunk.partition('-')
        if sep:
            result.extend(range(int(start), int(stop) + 1))
        else:
            result.append(int(chunk))
    return result


def format_float(value: float) -> str:
    """Représentation décimale exacte et stable d'un flottant (repr Python)"""
    return repr(float(value))
