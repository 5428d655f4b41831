from flowvi.harness.config import PRESETS, RunConfig, build_config, env_overrides, load_config
from flowvi.harness.data import (
    Corpus,
    Example,
    SchemaError,
    SyntheticConfig,
    gen_synthetic,
    load_corpus,
    salient_summary,
    save_corpus,
    synthetic_tokenizer,
)
from flowvi.harness.run import dump_latents, evaluate_run, load_run, run_experiment
