#pragma once

#include <span>
#include <vector>

#include "leco/gridworld.hpp"
#include "leco/tensor.hpp"

namespace leco {

// Channel-wise normalization of the integer view into (-1, 1), strictly
// inside the open interval.
inline double normalize_channel(int32_t v, int32_t vmax) {
  return (2.0 * v - vmax) / (vmax + 1.0);
}

inline constexpr int32_t kChannelMax[kObsChannels] = {kNumTileTypes - 1, kNumColors - 1,
                                                      kNumDoorStates - 1};

// [n, 7, 7, 3] normalized NHWC batch
inline Tensor obs_batch_tensor(std::span<const Observation> obs) {
  const int64_t n = static_cast<int64_t>(obs.size());
  Tensor t(Shape{n, kViewSize, kViewSize, kObsChannels});
  double* p = t.data();
  for (const Observation& o : obs)
    for (int i = 0; i < kViewSize * kViewSize; ++i)
      for (int c = 0; c < kObsChannels; ++c)
        *p++ = normalize_channel(o.view[static_cast<size_t>(i * kObsChannels + c)],
                                 kChannelMax[c]);
  return t;
}

inline Tensor obs_tensor(const Observation& o) { return obs_batch_tensor({&o, 1}); }

}  // namespace leco
