#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eaa/common.hpp"
#include "eaa/tensor.hpp"

namespace eaa {

// A stack of grayscale slices with a binary label per pixel. Images are
// stored as f32 so a file round trip reproduces them bit for bit; widening
// to f64 for training is exact.
struct Volume {
  std::size_t slices = 0, height = 0, width = 0;
  std::vector<float> image;          // slices*height*width, in [0,1]
  std::vector<std::uint8_t> labels;  // same extent, 0 or 1
  std::uint64_t seed = 0;            // generator seed; not serialized

  std::size_t plane() const { return height * width; }
};

// Synthetic volume: a noisy ellipse drifting slowly through the stack.
// Adjacent labels always differ but overlap heavily (IoU stays above 0.6),
// and the changed pixels hug the current outline, so neighbouring slices
// carry usable edge information. Requires slices >= 3 and height, width >= 16.
Volume gen_synthetic_volume(std::uint64_t seed, std::size_t slices, std::size_t height,
                            std::size_t width);

// Single-file container: magic "EAAV\x01", u32 LE dims (slices, height,
// width), image as f32 LE, labels as bytes, then a CRC-32 (u32 LE) over
// everything after the magic.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);

// One training example: an interior slice with its two neighbours.
struct SliceTriplet {
  std::size_t height = 0, width = 0;
  std::vector<double> prev, curr, next;  // height*width each
  std::vector<double> onehot;            // [2, height, width]: background, foreground
};

// Triplets for interior slices 1 .. slices-2.
std::vector<SliceTriplet> make_triplets(const Volume& v);

struct Batch {
  Tensor x_prev, x_curr, x_next;    // [B,1,H,W]
  Tensor label;                     // [B,2,H,W]
  std::vector<std::size_t> indices; // source triplet positions
};

// Shuffles triplet order (Fisher-Yates seeded with shuffle_seed), then cuts
// consecutive batches. The final short batch is kept.
std::vector<Batch> batch_iter(const std::vector<SliceTriplet>& triplets,
                              std::size_t batch_size, std::uint64_t shuffle_seed);

}  // namespace eaa
