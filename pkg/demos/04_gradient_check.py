"""
Checking gradients against finite differences
=============================================

Every backward rule in the tensor engine is compared with Richardson-
extrapolated central differences. The same routine drives
``ufafuse selfcheck``.
"""
from ufafuse import gradcheck

for name, builder in gradcheck.OP_CASES.items():
    print(gradcheck.run_check(name, builder, mode="64", instances=5).line())

# the whole network, all 26 parameter tensors, on 16x16 inputs
print(gradcheck.run_check("network", gradcheck.network_case, mode="64", instances=2).line())
