# config.py - Конфигурационный файл
import os
from dotenv import load_dotenv

# Загружаем переменные окружения
load_dotenv()

# Уровень логирования
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

# Каталог результатов по умолчанию
OUT_DIR = os.getenv('DGC_OUT_DIR', 'runs')

# Файл реестра запусков (создаётся внутри out_dir)
REGISTRY_FILE = os.getenv('DGC_REGISTRY_FILE', 'runs.db')

# Seed, если он не задан ни в конфиге, ни флагом --seed
DEFAULT_SEED = int(os.getenv('DGC_DEFAULT_SEED', '0'))

# Потоки для шагов узлов (1 - последовательно)
WORKERS = int(os.getenv('DGC_WORKERS', '1'))
