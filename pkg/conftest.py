import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'reasoning_project.settings')
django.setup()
