#include "dfa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace dfa {

std::string DatasetDescriptor::identity() const {
  std::ostringstream os;
  if (kind == Kind::synthetic) {
    os << "synthetic:c" << synthetic.classes << ":s" << synthetic.image_size << ":n"
       << synthetic.per_class << ":t" << synthetic.test_per_class << ":noise"
       << synthetic.noise << ":seed" << synthetic.seed;
  } else {
    os << "archive:" << archive.train_path << ":" << archive.test_path << ":c"
       << archive.classes << ":s" << archive.image_size;
  }
  return os.str();
}

namespace {

// One class template: a few low-frequency cosine gratings per channel,
// normalized to unit RMS so the noise level is directly comparable.
std::vector<float> class_template(Rng& rng, int channels, int size) {
  std::vector<double> t(static_cast<size_t>(channels) * size * size, 0.0);
  const int waves = 3;
  for (int k = 0; k < waves; ++k) {
    int fy = 0, fx = 0;
    while (fy == 0 && fx == 0) {
      fy = static_cast<int>(rng.uniform_int(0, 2));
      fx = static_cast<int>(rng.uniform_int(0, 2));
    }
    const double phase = rng.uniform(0, 2 * M_PI);
    std::vector<double> amp(static_cast<size_t>(channels));
    for (auto& a : amp) a = rng.uniform(-1, 1);
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double arg = 2 * M_PI * (fy * y + fx * x) / size + phase;
          t[(static_cast<size_t>(c) * size + y) * size + x] +=
              amp[static_cast<size_t>(c)] * std::cos(arg);
        }
  }
  double rms = 0;
  for (double v : t) rms += v * v;
  rms = std::sqrt(rms / static_cast<double>(t.size()));
  std::vector<float> out(t.size());
  for (size_t i = 0; i < t.size(); ++i)
    out[i] = static_cast<float>(rms > 0 ? t[i] / rms : t[i]);
  return out;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec, bool test_set) {
  Dataset ds;
  ds.classes = spec.classes;
  ds.channels = 3;
  ds.size = spec.image_size;
  const int per = test_set ? spec.test_per_class : spec.per_class;
  const int64_t n = int64_t(per) * spec.classes;
  ds.pixels.resize(static_cast<size_t>(n * ds.image_elems()));
  ds.labels.resize(static_cast<size_t>(n));

  std::vector<std::vector<float>> templates;
  for (int c = 0; c < spec.classes; ++c) {
    Rng trng = Rng::stream(spec.seed, "template-" + std::to_string(c));
    templates.push_back(class_template(trng, ds.channels, ds.size));
  }

  Rng srng = Rng::stream(spec.seed, test_set ? "samples-test" : "samples-train");
  int64_t idx = 0;
  for (int c = 0; c < spec.classes; ++c) {
    const auto& tpl = templates[static_cast<size_t>(c)];
    for (int s = 0; s < per; ++s, ++idx) {
      ds.labels[static_cast<size_t>(idx)] = c;
      float* img = ds.pixels.data() + idx * ds.image_elems();
      const double gain = srng.uniform(0.85, 1.15);
      for (int64_t i = 0; i < ds.image_elems(); ++i)
        img[i] = static_cast<float>(gain * tpl[static_cast<size_t>(i)] +
                                    spec.noise * srng.normal());
    }
  }
  return ds;
}

Dataset read_archive(const std::string& path, int classes, int image_size) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open dataset archive: " + path);
  const int64_t fsize = static_cast<int64_t>(in.tellg());
  in.seekg(0);
  const int64_t record = 1 + int64_t(image_size) * image_size * 3;
  if (fsize % record != 0) {
    const int64_t complete = fsize / record;
    throw IoError("corrupt record length in " + path + ": trailing " +
                  std::to_string(fsize - complete * record) + " bytes at offset " +
                  std::to_string(complete * record));
  }
  const int64_t n = fsize / record;

  Dataset ds;
  ds.classes = classes;
  ds.channels = 3;
  ds.size = image_size;
  ds.pixels.resize(static_cast<size_t>(n * ds.image_elems()));
  ds.labels.resize(static_cast<size_t>(n));

  std::vector<unsigned char> raw(static_cast<size_t>(record));
  for (int64_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(raw.data()), record);
    if (!in) throw IoError("short read in " + path + " at offset " + std::to_string(i * record));
    const int label = raw[0];
    if (label >= classes)
      throw IoError("label " + std::to_string(label) + " out of range in " + path +
                    " at record " + std::to_string(i));
    ds.labels[static_cast<size_t>(i)] = label;
    float* img = ds.pixels.data() + i * ds.image_elems();
    const int hw = image_size * image_size;
    // interleaved (y,x,ch) bytes -> planar CHW floats in [-1, 1]
    for (int p = 0; p < hw; ++p)
      for (int c = 0; c < 3; ++c)
        img[c * hw + p] = (raw[1 + static_cast<size_t>(p) * 3 + c] / 255.0f - 0.5f) / 0.5f;
  }
  return ds;
}

void write_archive(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open archive for writing: " + path);
  const int hw = ds.size * ds.size;
  std::vector<unsigned char> raw(static_cast<size_t>(1 + hw * 3));
  for (int64_t i = 0; i < ds.count(); ++i) {
    raw[0] = static_cast<unsigned char>(ds.labels[static_cast<size_t>(i)]);
    const float* img = ds.image(i);
    for (int p = 0; p < hw; ++p)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img[c * hw + p] * 0.5f + 0.5f, 0.0f, 1.0f);
        raw[1 + static_cast<size_t>(p) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
  }
}

namespace {

Dataset take(const Dataset& src, std::span<const int64_t> idx) {
  Dataset ds;
  ds.classes = src.classes;
  ds.channels = src.channels;
  ds.size = src.size;
  ds.pixels.resize(idx.size() * static_cast<size_t>(src.image_elems()));
  ds.labels.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src.image(idx[i]), src.image_elems(),
                ds.pixels.data() + static_cast<int64_t>(i) * src.image_elems());
    ds.labels[i] = src.labels[static_cast<size_t>(idx[i])];
  }
  return ds;
}

}  // namespace

DataSplits load_dataset(const DatasetDescriptor& desc, double train_fraction,
                        uint64_t split_seed) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw ConfigError("train_fraction must be in (0,1), got " + std::to_string(train_fraction));
  Dataset pool, test;
  if (desc.kind == DatasetDescriptor::Kind::synthetic) {
    pool = generate_synthetic(desc.synthetic, false);
    test = generate_synthetic(desc.synthetic, true);
  } else {
    pool = read_archive(desc.archive.train_path, desc.archive.classes, desc.archive.image_size);
    test = read_archive(desc.archive.test_path, desc.archive.classes, desc.archive.image_size);
  }
  if (pool.count() == 0) throw ConfigError("dataset is empty");

  Rng rng = Rng::stream(split_seed, "train-val-split");
  std::vector<int64_t> order = shuffled_indices(pool.count(), rng);
  const int64_t n_train = static_cast<int64_t>(std::llround(train_fraction * pool.count()));
  DataSplits splits;
  splits.train = take(pool, std::span(order).first(static_cast<size_t>(n_train)));
  splits.val = take(pool, std::span(order).subspan(static_cast<size_t>(n_train)));
  splits.test = std::move(test);
  return splits;
}

void flip_horizontal(float* chw, int channels, int size) {
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < size; ++y) {
      float* row = chw + (c * size + y) * size;
      std::reverse(row, row + size);
    }
}

Batch make_batch(const Dataset& ds, std::span<const int64_t> indices, DType dt, Rng* aug_rng) {
  const int64_t B = static_cast<int64_t>(indices.size());
  const int S = ds.size, C = ds.channels;
  Batch batch;
  batch.x = Tensor::zeros({B, C, S, S}, dt);
  batch.labels.resize(static_cast<size_t>(B));

  std::vector<float> tmp(static_cast<size_t>(ds.image_elems()));
  constexpr int kPad = 4;
  for (int64_t b = 0; b < B; ++b) {
    batch.labels[static_cast<size_t>(b)] = ds.labels[static_cast<size_t>(indices[b])];
    const float* src = ds.image(indices[b]);
    const float* use = src;
    if (aug_rng) {
      const int dy = static_cast<int>(aug_rng->uniform_int(0, 2 * kPad));
      const int dx = static_cast<int>(aug_rng->uniform_int(0, 2 * kPad));
      const bool flip = aug_rng->coin();
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < S; ++y)
          for (int x = 0; x < S; ++x) {
            const int sy = y + dy - kPad, sx = x + dx - kPad;
            tmp[(static_cast<size_t>(c) * S + y) * S + x] =
                (sy >= 0 && sy < S && sx >= 0 && sx < S)
                    ? src[(c * S + sy) * S + sx]
                    : 0.0f;
          }
      if (flip) flip_horizontal(tmp.data(), C, S);
      use = tmp.data();
    }
    dispatch_dtype(dt, [&](auto tag) {
      using T = decltype(tag);
      T* dst = batch.x.data<T>().data() + b * ds.image_elems();
      for (int64_t i = 0; i < ds.image_elems(); ++i) dst[i] = static_cast<T>(use[i]);
    });
  }
  return batch;
}

std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  return idx;
}

}  // namespace dfa
