#include "stylefed/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <string>

#include "stylefed/errors.hpp"

namespace stylefed {

void Dataset::validate() const {
  if (labels.empty()) throw ConfigError("dataset is empty");
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw ConfigError("dataset features " + features.shape_string() + " do not match " +
                      std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= class_count) throw ConfigError("label " + std::to_string(y) + " >= class count");
  }
  if (!features.all_finite()) throw ConfigError("dataset features are not finite");
}

Dataset Dataset::subset(const std::vector<std::size_t>& index) const {
  Dataset out;
  out.class_count = class_count;
  out.features = Tensor::zeros(index.size(), dim());
  out.labels.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto src = features.row_span(index[i]);
    std::copy(src.begin(), src.end(), out.features.row_span(i).begin());
    out.labels.push_back(labels[index[i]]);
  }
  return out;
}

std::vector<std::size_t> Dataset::present_classes() const {
  std::set<std::size_t> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

Dataset generate_gaussian_mixture(std::size_t classes, std::size_t dim, std::size_t per_class, double separation,
                                  std::uint64_t seed) {
  if (classes < 2) throw ConfigError("classes must be >= 2");
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (per_class < 2) throw ConfigError("per_class must be >= 2");
  if (!(separation > 0)) throw ConfigError("separation must be positive");

  Rng rng = make_rng(seed, Stream::kData);
  // Means are drawn in a cube roomy enough for `classes` balls of diameter
  // `separation`, then rejected until pairwise distances clear it.
  const double half = separation * std::max(1.0, std::pow(static_cast<double>(classes), 1.0 / dim));
  std::uniform_real_distribution<double> coord(-half, half);
  std::vector<std::vector<double>> means;
  constexpr int kAttempts = 10000;
  for (std::size_t c = 0; c < classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      std::vector<double> m(dim);
      for (double& v : m) v = coord(rng);
      placed = std::all_of(means.begin(), means.end(), [&](const std::vector<double>& o) {
        double s = 0.0;
        for (std::size_t j = 0; j < dim; ++j) s += (m[j] - o[j]) * (m[j] - o[j]);
        return std::sqrt(s) >= separation;
      });
      if (placed) means.push_back(std::move(m));
    }
    if (!placed) {
      throw ConfigError("cannot place " + std::to_string(classes) + " class means at separation " +
                        std::to_string(separation) + " in dimension " + std::to_string(dim));
    }
  }

  Dataset out;
  out.class_count = classes;
  out.features = Tensor::zeros(classes * per_class, dim);
  out.labels.reserve(classes * per_class);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = c * per_class + i;
      for (std::size_t j = 0; j < dim; ++j) out.features(row, j) = means[c][j] + noise(rng);
      out.labels.push_back(c);
    }
  }
  return out;
}

PartitionPlan dirichlet_partition(const Dataset& dataset, std::size_t clients, double alpha, double noise_var,
                                  std::uint64_t seed) {
  if (!(alpha > 0)) throw ConfigError("alpha must be positive");
  if (!(noise_var >= 0)) throw ConfigError("noise_var must be non-negative");
  if (clients < 1) throw ConfigError("clients must be >= 1");
  dataset.validate();

  const std::size_t classes = dataset.class_count;
  Rng rng = make_rng(seed, Stream::kPartition);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::normal_distribution<double> noise(0.0, std::sqrt(noise_var));

  PartitionPlan plan;
  plan.assignments.resize(clients);
  plan.class_shares = Tensor::zeros(classes, clients);

  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.labels[i]].push_back(i);

  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> share(clients);
    double total = 0.0;
    for (double& s : share) total += (s = gamma(rng));
    if (total > 0.0) {
      for (double& s : share) s /= total;
    } else {
      // Every gamma draw underflowed (tiny alpha): the Dirichlet limit is a vertex.
      std::fill(share.begin(), share.end(), 0.0);
      share[std::uniform_int_distribution<std::size_t>(0, clients - 1)(rng)] = 1.0;
    }
    if (noise_var > 0.0) {
      std::vector<double> perturbed(share);
      double ptotal = 0.0;
      for (double& s : perturbed) ptotal += (s = std::max(0.0, s + noise(rng)));
      if (ptotal > 0.0) {
        for (double& s : perturbed) s /= ptotal;
        share = std::move(perturbed);
      }
    }
    for (std::size_t k = 0; k < clients; ++k) plan.class_shares(c, k) = share[k];

    std::discrete_distribution<std::size_t> pick(share.begin(), share.end());
    for (std::size_t idx : by_class[c]) plan.assignments[pick(rng)].push_back(idx);
  }

  // Empty-client repair: borrow one sample from the currently largest client.
  for (std::size_t k = 0; k < clients; ++k) {
    if (!plan.assignments[k].empty()) continue;
    auto largest = std::max_element(plan.assignments.begin(), plan.assignments.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    if (largest->size() < 2) throw ConfigError("not enough samples to give every client at least one");
    plan.assignments[k].push_back(largest->back());
    largest->pop_back();
  }
  for (auto& a : plan.assignments) std::sort(a.begin(), a.end());
  return plan;
}

std::vector<StyleShiftSpec> random_style_shifts(std::size_t clients, std::size_t dim, double scale_spread,
                                                double offset_std, double noise_std, std::uint64_t seed) {
  if (scale_spread < 0 || offset_std < 0 || noise_std < 0) throw ConfigError("style parameters must be >= 0");
  Rng rng = make_rng(seed, Stream::kStyle);
  std::uniform_real_distribution<double> log_scale(-scale_spread, scale_spread);
  std::normal_distribution<double> offset(0.0, 1.0);
  std::vector<StyleShiftSpec> out(clients);
  for (auto& s : out) {
    s.scale.resize(dim);
    s.offset.resize(dim);
    for (double& v : s.scale) v = std::exp(log_scale(rng));
    for (double& v : s.offset) v = offset_std * offset(rng);
    s.noise_std = noise_std;
  }
  return out;
}

std::vector<Dataset> apply_style_shift(const Dataset& dataset, const std::vector<StyleShiftSpec>& styles,
                                       const PartitionPlan& plan, std::uint64_t seed) {
  if (styles.size() != plan.clients()) {
    throw ShapeError("apply_style_shift: " + std::to_string(styles.size()) + " styles for " +
                     std::to_string(plan.clients()) + " clients");
  }
  const std::size_t d = dataset.dim();
  std::vector<Dataset> out;
  out.reserve(plan.clients());
  for (std::size_t k = 0; k < plan.clients(); ++k) {
    const auto& style = styles[k];
    if (style.scale.size() != d || style.offset.size() != d) throw ShapeError("apply_style_shift: style dimension");
    if (std::any_of(style.scale.begin(), style.scale.end(), [](double s) { return !(s > 0); })) {
      throw ConfigError("style scale entries must be positive");
    }
    Rng rng = make_rng(seed, Stream::kStyle, {k, 1});
    std::normal_distribution<double> noise(0.0, 1.0);
    Dataset shard = dataset.subset(plan.assignments[k]);
    for (std::size_t i = 0; i < shard.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        double& x = shard.features(i, j);
        x = style.scale[j] * x + style.offset[j];
        if (style.noise_std > 0) x += style.noise_std * noise(rng);
      }
    }
    out.push_back(std::move(shard));
  }
  return out;
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& dataset, double test_fraction, Rng& rng) {
  if (!(test_fraction >= 0 && test_fraction < 1)) throw ConfigError("test_fraction must lie in [0, 1)");
  std::vector<std::vector<std::size_t>> by_class(dataset.class_count);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.labels[i]].push_back(i);
  std::vector<std::size_t> train, test;
  for (auto& idx : by_class) {
    if (idx.empty()) continue;
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_test = 0;
    if (idx.size() >= 2 && test_fraction > 0) {
      n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(test_fraction * idx.size())));
      n_test = std::min(n_test, idx.size() - 1);
    }
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {dataset.subset(train), dataset.subset(test)};
}

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

namespace {

template <typename T>
void put_le(std::vector<char>& buf, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > buf_.size()) {
      throw FormatError(std::string("truncated dataset file while reading ") + what, pos_);
    }
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::vector<char> buf;
  buf.reserve(20 + dataset.features.size() * 8 + dataset.size() * 4);
  buf.insert(buf.end(), {'F', 'S', 'D', 'S'});
  put_le<std::uint32_t>(buf, kDatasetFormatVersion);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(dataset.size()));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(dataset.dim()));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(dataset.class_count));
  for (double x : dataset.features.data()) put_le<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(x));
  for (std::size_t y : dataset.labels) put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(y));

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Reader r(buf);
  if (buf.size() < 4 || std::memcmp(buf.data(), "FSDS", 4) != 0) throw FormatError("bad magic, expected FSDS", 0);
  r.get<std::uint32_t>("magic");
  const std::size_t version_at = r.pos();
  if (const auto v = r.get<std::uint32_t>("version"); v != kDatasetFormatVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(v), version_at);
  }
  const std::size_t n = r.get<std::uint32_t>("N");
  const std::size_t d = r.get<std::uint32_t>("d_in");
  const std::size_t header_c = r.pos();
  const std::size_t c = r.get<std::uint32_t>("C");
  if (n == 0) throw FormatError("dataset declares zero samples", 8);
  if (c == 0) throw FormatError("dataset declares zero classes", header_c);
  const std::size_t need = n * d * 8 + n * 4;
  if (r.remaining() < need) {
    throw FormatError("truncated payload: need " + std::to_string(need) + " bytes, have " +
                          std::to_string(r.remaining()),
                      buf.size());
  }
  if (r.remaining() > need) throw FormatError("trailing bytes after payload", r.pos() + need);

  Dataset out;
  out.class_count = c;
  std::vector<double> features(n * d);
  for (double& x : features) x = std::bit_cast<double>(r.get<std::uint64_t>("features"));
  out.features = Tensor({n, d}, std::move(features));
  out.labels.resize(n);
  for (auto& y : out.labels) {
    const std::size_t at = r.pos();
    y = r.get<std::uint32_t>("labels");
    if (y >= c) throw FormatError("label " + std::to_string(y) + " >= class count " + std::to_string(c), at);
  }
  return out;
}

}  // namespace stylefed
