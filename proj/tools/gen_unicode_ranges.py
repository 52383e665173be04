#!/usr/bin/env python3
"""Emit src/unicode_ranges.inc: code point ranges for the L* and N* categories.

Usage: python3 tools/gen_unicode_ranges.py > src/unicode_ranges.inc
"""
import sys
import unicodedata


def ranges(pred):
    out, start = [], None
    for cp in range(0x110000):
        hit = pred(unicodedata.category(chr(cp)))
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def emit(name, rs):
    print(f"inline constexpr CodepointRange {name}[] = {{")
    for i in range(0, len(rs), 4):
        print("    " + " ".join(f"{{0x{a:X}, 0x{b:X}}}," for a, b in rs[i:i + 4]))
    print("};")


print(f"// Generated by tools/gen_unicode_ranges.py (Unicode {unicodedata.unidata_version}). Do not edit.")
emit("kLetterRanges", ranges(lambda c: c.startswith("L")))
emit("kNumberRanges", ranges(lambda c: c.startswith("N")))
