"""Multi-task next-node completion over flattened abstract syntax trees."""
from .corpus import (AstNode, AstTree, NodeLabel, PathIds, Query, flatten, make_queries, parse_ast_json,
                     path_to_root, preorder, prefix_tree)
from .errors import (AstCompleteError, ConfigError, DivergenceError, DomainError, EmptyCorpusError,
                     ParseError, ShapeError, StructureError)
from .evaluation import (DIFFICULT_TYPES, EvalReport, build_report, cliffs_delta, normalized_improvement,
                         per_type_accuracy, top1_accuracy, wilcoxon_rank_sum)
from .model import CodeCompletionModel, MemoryState, ModelConfig, load_checkpoint, mtl_loss, save_checkpoint
from .shards import Shard, build_shard, load_shard, write_shard
from .training import TrainConfig, evaluate, train, weight_sweep
from .vocab import Vocab, build_type_vocab, build_value_vocab

__version__ = "0.1.0"
