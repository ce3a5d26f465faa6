# Architecture family and its required tensors
FAMILY_TINY_TEXT_V1 = "tiny_text_v1"
KNOWN_FAMILIES = [FAMILY_TINY_TEXT_V1]

EMBED_WEIGHT = "embed.weight"
DENSE_WEIGHT = "dense.weight"
DENSE_BIAS = "dense.bias"
HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"
REQUIRED_TENSORS = [EMBED_WEIGHT, DENSE_WEIGHT, DENSE_BIAS, HEAD_WEIGHT, HEAD_BIAS]
HEAD_TENSORS = [HEAD_WEIGHT, HEAD_BIAS]

# Checkpoint roles
ROLE_BASE = "base"
ROLE_FINE_TUNED = "fine_tuned"
ROLE_MERGED = "merged"
ROLE_EXPANDED = "expanded"
ROLES = [ROLE_BASE, ROLE_FINE_TUNED, ROLE_MERGED, ROLE_EXPANDED]

# Checkpoint file format
MANIFEST_LENGTH_BYTES = 8
DTYPE_F32 = "f32"
BYTES_PER_F32 = 4

# Tokenizer
MAX_TOKENS = 512        # Longer texts are truncated
RESERVED_TOKEN_ID = 0   # Empty text maps here
FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
UINT64_MASK = 0xFFFFFFFFFFFFFFFF

# Merge strategies
STRATEGY_SOUP = "soup"
STRATEGY_TIES = "ties"
STRATEGY_DARE_TIES = "dare_ties"
STRATEGY_TASK_ARITHMETIC = "task_arithmetic"
STRATEGY_DARE_SOUP = "dare_soup"
STRATEGIES = [STRATEGY_SOUP, STRATEGY_TIES, STRATEGY_DARE_TIES,
              STRATEGY_TASK_ARITHMETIC, STRATEGY_DARE_SOUP]
BASE_FREE_STRATEGIES = [STRATEGY_SOUP]

TRIM_GLOBAL = "global"
TRIM_PER_TENSOR = "per_tensor"
TRIM_SCOPES = [TRIM_GLOBAL, TRIM_PER_TENSOR]

SOUP_WEIGHT_TOLERANCE = 1e-9

# Search (model search over task vector densities)
SEARCH_TRIALS = 500
VALIDATION_SAMPLES = 600
TEST_SAMPLES = 1000
BASELINE_SAMPLES = 3000
BETA_ALPHA = 1.2
BETA_BETA = 2.0

# Evaluation
EVAL_SAMPLE_CAP = 3000
PROBABILITY_TOLERANCE = 1e-6
