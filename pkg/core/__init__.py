from pathlib import Path
from os import environ

BASE_PATH = Path(__file__).parent.parent

ARTIFACT_PATH = Path(environ.get("FAT_ARTIFACT_PATH", BASE_PATH / "artifacts"))
DATA_PATH = Path(environ.get("FAT_DATA_PATH", BASE_PATH / "data"))
