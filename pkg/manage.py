#!/usr/bin/env python
"""
Script de gestion Django pour QDiffusion

Ce script expose les commandes du moteur de simulation :
- python manage.py calibrate --config engine.cfg --out predictors.txt
- python manage.py run --config engine.cfg --predictors predictors.txt --out runs/a
- python manage.py report runs/a/trace.tsv
- python manage.py quantize_tensor x.qdt --format nvfp4 --out x.q
- python manage.py ablate / similarity
- python manage.py test
"""

import os
import sys
import warnings
from pathlib import Path

# =============================================================================
# CONFIGURATION DE L'ENVIRONNEMENT
# =============================================================================

def setup_environment():
    """Configure l'environnement Django"""
    warnings.filterwarnings("ignore", category=DeprecationWarning)

    try:
        import django  # noqa: F401
    except ImportError:
        print("❌ Erreur: Django n'est pas installé.", file=sys.stderr)
        print("💡 Installez les dépendances avec: pip install -r requirements.txt", file=sys.stderr)
        sys.exit(1)

    if sys.version_info < (3, 10):
        print("❌ Erreur: Python 3.10+ est requis.", file=sys.stderr)
        print(f"💡 Version actuelle: {sys.version}", file=sys.stderr)
        sys.exit(1)

    project_root = Path(__file__).resolve().parent
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))

# =============================================================================
# FONCTION PRINCIPALE
# =============================================================================

def main():
    """Fonction principale du script manage.py"""
    try:
        setup_environment()

        os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'qdiffusion.settings')

        from django.core.management import execute_from_command_line
        from django.core.management.base import CommandError
        from core.commands import exit_code_for
        from core.exceptions import EngineError

        try:
            execute_from_command_line(sys.argv)
        except CommandError as e:
            # erreurs moteur levées hors de run_from_argv : le code de sortie est conservé
            print(f"❌ {e}", file=sys.stderr)
            sys.exit(e.returncode)
        except EngineError as e:
            print(f"❌ {e}", file=sys.stderr)
            sys.exit(exit_code_for(e))

    except ImportError as e:
        print(f"❌ Erreur d'import: {e}", file=sys.stderr)
        print("💡 Vérifiez que toutes les dépendances sont installées:", file=sys.stderr)
        print("   pip install -r requirements.txt", file=sys.stderr)
        sys.exit(1)

    except Exception as e:
        print(f"❌ Erreur inattendue ({type(e).__name__}): {e}", file=sys.stderr)
        sys.exit(1)

# =============================================================================
# POINT D'ENTRÉE
# =============================================================================

if __name__ == '__main__':
    main()
