"""
Prompt segmentation and 3-axis rotary positions
===============================================
"""

import numpy as np

from flow_align.posenc import RotaryConfig, positions_for_sequence, rotate
from flow_align.prompttok import join_spans, segment_prompt

# quoted text is split into single characters, everything else into words
for prompt in ['A sign that says "OPEN 24h"', "海报上写着“新年快乐”", "naïve café 「品」"]:
    spans = segment_prompt(prompt)
    print(prompt)
    for s in spans:
        print("   %-11s %-6r bytes %s" % (s.kind, s.text, s.byte_range))
    assert join_spans(spans) == prompt

# positions: text tokens sit on the diagonal, image tokens on a (row, col) grid
pos = positions_for_sequence(3, (2, 3))
print(np.asarray(pos))

# rotating query and key by the same offset leaves their dot product unchanged
cfg = RotaryConfig(16)
print("channel pairs per axis:", cfg.split)
rng = np.random.default_rng(0)
q, k = rng.standard_normal(16), rng.standard_normal(16)
a, b, shift = np.array([0, 2, 5]), np.array([0, 7, 1]), np.array([3, -4, 10])
print(np.dot(rotate(q, a, cfg), rotate(k, b, cfg)), np.dot(rotate(q, a + shift, cfg), rotate(k, b + shift, cfg)))
