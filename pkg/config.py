import os


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() == "true"


class Config:
    # --- LOGGING ---
    # Nível do logger "sage" (DEBUG, INFO, WARNING, ERROR).
    LOG_LEVEL = os.getenv("SAGE_LOG_LEVEL", "INFO").upper()

    # --- OUTPUT ---
    # Diretório padrão dos runs quando o CLI não recebe --output.
    OUTPUT_DIR = os.getenv("SAGE_OUTPUT_DIR", "runs")

    # --- METRICS ---
    # Snapshot prometheus (prometheus.txt) gravado ao final do train.
    METRICS_ENABLED = _env_flag("SAGE_METRICS_ENABLED", "true")

    # --- VERIFICATION ---
    # Amostras por operação na suíte "axiom" do comando verify.
    AXIOM_SAMPLES = int(os.getenv("SAGE_AXIOM_SAMPLES", "10000"))

    # Testes lentos (end-to-end) só rodam com SAGE_RUN_SLOW=true.
    RUN_SLOW_TESTS = _env_flag("SAGE_RUN_SLOW", "false")


config = Config()
