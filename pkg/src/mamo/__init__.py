"""Meta-operator training for complex query answering over incomplete knowledge graphs."""

from .backbone import ParameterStore, forward, init_store, loss, score
from .kg import GraphSplit, KnowledgeGraph, generate_synthetic_kg, load_triples, neighbors
from .oracle import FewShotDataset, GroundedQuery, Setting, build_fewshot_dataset, evaluate, ground
from .query import (
    OperatorSite,
    OperatorTypeKey,
    QueryTemplate,
    Scheme,
    builtin_templates,
    categorize,
    dnf_decompose,
    enumerate_projection_sites,
    parse_template,
)
from .train import Algorithm, TrainConfig, adapt_operator, inference_adapt, maml_step, mamo_step, vanilla_step

__version__ = "0.1.0"
