#pragma once

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define LEFM_HAVE_MXCSR 1
#endif

namespace lefm::nn {

/// Flushes subnormal float results and operands to zero on the calling thread
/// for its lifetime. Training drives some Adam moments and activations into the
/// subnormal range, where x86 arithmetic is two orders of magnitude slower.
class FlushDenormalsGuard {
public:
    FlushDenormalsGuard()
    {
#ifdef LEFM_HAVE_MXCSR
        saved_ = _mm_getcsr();
        _mm_setcsr(saved_ | kFlushToZero | kDenormalsAreZero);
#endif
    }
    ~FlushDenormalsGuard()
    {
#ifdef LEFM_HAVE_MXCSR
        _mm_setcsr(saved_);
#endif
    }
    FlushDenormalsGuard(const FlushDenormalsGuard&) = delete;
    FlushDenormalsGuard& operator=(const FlushDenormalsGuard&) = delete;

private:
#ifdef LEFM_HAVE_MXCSR
    static constexpr unsigned kFlushToZero = 0x8000;
    static constexpr unsigned kDenormalsAreZero = 0x0040;
    unsigned saved_ = 0;
#endif
};

} // namespace lefm::nn
