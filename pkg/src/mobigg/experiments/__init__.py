from .runner import ResultTable, aggregate, pooled_survival, read_table, run_experiment
from .schema import KINDS, SCHEMAS, ExperimentSpec, SchemaError, load_spec, make_spec, parse_config_text

__all__ = [
    "KINDS",
    "SCHEMAS",
    "ExperimentSpec",
    "ResultTable",
    "SchemaError",
    "aggregate",
    "load_spec",
    "make_spec",
    "parse_config_text",
    "pooled_survival",
    "read_table",
    "run_experiment",
]
