"""Segment descriptors: address scattered bytes, move them, tile them.

A descriptor list is a set of (offset, length) segments over one named
buffer.  Gather reads them in order into one contiguous block; scatter is
the inverse.  A transfer engine does not care where segments begin: it cuts
the logical stream into fixed-size slices and ships those.
"""

import numpy as np

from shuffleforge.descriptor import DescriptorList

buf = np.frombuffer(b"The quick brown fox jumps over the lazy dog.", dtype=np.uint8).copy()

# Pick three words out of the sentence, in a deliberate order.
words = DescriptorList(
    "sentence",
    offsets=np.array([16, 4, 35]),
    lengths=np.array([3, 5, 4]),
)
stream = words.gather(buf)
print("gather:", stream.tobytes())

# locate() finds the segment holding any position of the logical stream.
for pos in (0, 3, 7, 9):
    seg, off = words.locate(pos)
    print(f"stream byte {pos} lives in segment {seg} at offset {off}")

# slice_plan cuts the 12-byte stream into wire slices of 5 bytes; slices
# ignore segment boundaries entirely.
for s in words.slice_plan(5):
    print("slice:", s)

# gather_range pulls any slice of the stream without materializing the
# whole stream first; this is what a pipelined sender does slot by slot.
print("middle slice:", words.gather_range(5, 5, buf).tobytes())

# Scatter writes a contiguous block back out to the segments.  Descriptor
# tables have a compact wire form, so a receiver can reconstruct the exact
# placement from bytes alone.
wire = words.to_bytes()
print("wire table:", len(wire), "bytes")
shouting = np.frombuffer(stream.tobytes().upper(), dtype=np.uint8)
DescriptorList.from_bytes("sentence", wire).scatter(shouting, buf)
print("scatter result:", buf.tobytes())
