# Copyright © 2024 MoPD Lab Contributors.

from mopd.nn.layers.base import Module
from mopd.nn.layers.gating import (
    GatingNetwork,
    gate_backward,
    gate_backward_batch,
    gate_forward,
    gate_forward_batch,
    gate_statistics,
    keep_top,
    uniform_random_gate,
)
from mopd.nn.layers.prompt import (
    SoftPrompt,
    StudentModel,
    grad_p_soft_wrt_prompt,
    p_soft,
    p_soft_batch,
    predict,
    predict_batch,
    student_text_table,
)
