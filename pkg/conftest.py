import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "qdiffusion.settings")
django.setup()
