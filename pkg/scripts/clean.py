import shutil
from glob import glob

for directory in ("dist/", "site/", "build/", "output/", ".pytest_cache/"):
    shutil.rmtree(directory, ignore_errors=True)

for path in glob("*.egg-info") + glob("**/__pycache__/", recursive=True):
    shutil.rmtree(path, ignore_errors=True)
