#pragma once

namespace divot::kern {

// Instruction sets the float32 kernels can run on. `scalar` is the reference
// implementation; `avx2` requires AVX2+FMA and is selected at runtime when the
// CPU supports it. The DIVOTLAB_KERNELS environment variable ("auto", "scalar",
// "avx2") overrides autodetection; "avx2" on an unsupported CPU is an error.
enum class Isa { scalar, avx2 };

Isa active_isa();
const char* isa_name(Isa isa);

// Test hook: force a specific ISA for the current process (bypasses the env
// var). Passing avx2 on a CPU without it throws.
void force_isa(Isa isa);

bool cpu_has_avx2_fma();

}  // namespace divot::kern
