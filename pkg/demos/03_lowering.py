#!/usr/bin/env python3
"""Lowering layers to sparse affine matrices, on the canonical 2x2 example.

A 2x2 image is flattened to [11, 12, 21, 22, 1]; the 1x2 difference kernel
[-1, 1] becomes a two-row matrix whose action equals the sliding-window
convolution, and the rectifier stays an elementwise marker.
"""

from keynet.network import lower_network, plain_forward, vectorize
from keynet.zoo import lenet, tiny_demo, tiny_demo_image

# ------------------------------------------------------------
# Vectorization order: channel-major, row-major, then columns
# ------------------------------------------------------------
image = tiny_demo_image()
x = vectorize(image)
print("image:\n", image[0])
print("vectorized (with homogeneous 1):", x)

# ------------------------------------------------------------
# The difference kernel as a matrix
# ------------------------------------------------------------
net = tiny_demo()
lowered = lower_network(net)
conv = lowered.steps[0]
print("\nlowered conv matrix (2+1 x 4+1):")
print(conv.matrix.to_dense())

# ------------------------------------------------------------
# Forward pass: matrix, then rectifier
# ------------------------------------------------------------
after_conv = conv.matrix.to_dense() @ x
out = plain_forward(lowered, x)
print("\nafter conv      :", after_conv)
print("after rectifier :", out)
print("(horizontal differences 12-11 and 22-21, rectified)")

# ------------------------------------------------------------
# The same machinery scales to a real topology
# ------------------------------------------------------------
big = lower_network(lenet(seed=0))
print("\nlenet boundary shapes:")
for i, shape in enumerate(big.shapes):
    print(f"  boundary {i}: {shape}")
total = sum(s.matrix.nnz for s in big.steps if hasattr(s, "matrix"))
print(f"total lowered nonzeros: {total}")
