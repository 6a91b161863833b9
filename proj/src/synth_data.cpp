#include "abx/synth_data.hpp"

#include "abx/config.hpp"
#include "abx/error.hpp"
#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace abx {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Index> Slide::discriminative() const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == Role::Discriminative) out.push_back(static_cast<Index>(i));
  return out;
}

std::vector<Index> Slide::noisy() const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == Role::Noisy) out.push_back(static_cast<Index>(i));
  return out;
}

std::uint64_t config_hash(const DatasetConfig& config) {
  // FNV-1a over the canonical JSON dump.
  const std::string text = to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SyntheticWorld make_world(const DatasetConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0xD0));
  const Index d = config.raw_dim;
  const double sigma = config.noise_sigma;
  SyntheticWorld w;
  w.background_centers = gaussian_matrix(config.background_components, d, rng, 1.5 * sigma);

  // Orthonormal basis of the background span, extended class by class.
  std::vector<Vector> basis;
  auto orthogonalize = [&basis](Vector v) {
    for (const Vector& b : basis) v -= b.dot(v) * b;
    return v;
  };
  for (Index k = 0; k < w.background_centers.rows(); ++k) {
    Vector v = orthogonalize(w.background_centers.row(k).transpose());
    if (v.norm() > 1e-9) basis.push_back(v.normalized());
  }

  w.class_offsets = Matrix::Zero(config.classes, d);
  for (Index c = 1; c < config.classes; ++c) {
    Vector dir = gaussian_matrix(d, 1, rng);
    Vector orth = orthogonalize(dir);
    if (orth.norm() > 1e-6 * dir.norm()) dir = orth;
    dir.normalize();
    basis.push_back(dir);
    w.class_offsets.row(c) = config.separation * sigma * dir.transpose();
  }

  w.scale_maps.push_back(Matrix::Identity(d, d));
  for (Index j = 1; j < config.scales; ++j) {
    Matrix g = Matrix::Identity(d, d) + 0.3 * gaussian_matrix(d, d, rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Index c = 0; c < d; ++c)
      if (r(c, c) < 0) q.col(c) *= -1.0;
    w.scale_maps.push_back(std::move(q));
  }
  return w;
}

Slide make_slide(const DatasetConfig& config, const SyntheticWorld& world, int id, int label,
                 Rng& rng) {
  const Index d = config.raw_dim;
  const double sigma = config.noise_sigma;
  std::uniform_int_distribution<Index> size_dist(config.min_instances, config.max_instances);
  const Index n = size_dist(rng);

  Index witnesses = 0;
  if (label > 0) {
    witnesses = std::max<Index>(1, std::lround(config.witness_rate * static_cast<double>(n)));
    witnesses = std::min(witnesses, n);
  }

  Slide slide;
  slide.id = id;
  slide.label = label;
  slide.roles.assign(static_cast<std::size_t>(n), Role::Noisy);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (Index i = 0; i < witnesses; ++i) slide.roles[static_cast<std::size_t>(order[i])] = Role::Discriminative;

  std::normal_distribution<double> noise(0.0, sigma);
  std::uniform_int_distribution<Index> component(0, world.background_centers.rows() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> hotspot(0.2, 0.8);
  std::normal_distribution<double> spread(0.0, 0.08);
  const double cx = hotspot(rng);
  const double cy = hotspot(rng);
  const Index grid = config.region_grid;

  slide.latent.resize(n, d);
  slide.regions.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const bool disc = slide.roles[static_cast<std::size_t>(i)] == Role::Discriminative;
    RowVector mean = world.background_centers.row(component(rng));
    if (disc) mean += world.class_offsets.row(label);
    for (Index c = 0; c < d; ++c) slide.latent(i, c) = mean(c) + noise(rng);

    double x = disc ? cx + spread(rng) : unit(rng);
    double y = disc ? cy + spread(rng) : unit(rng);
    x = std::clamp(x, 0.0, std::nextafter(1.0, 0.0));
    y = std::clamp(y, 0.0, std::nextafter(1.0, 0.0));
    const auto gx = std::min<Index>(grid - 1, static_cast<Index>(x * static_cast<double>(grid)));
    const auto gy = std::min<Index>(grid - 1, static_cast<Index>(y * static_cast<double>(grid)));
    slide.regions[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(gx + grid * gy);
  }

  for (const Matrix& t : world.scale_maps) {
    Matrix view = slide.latent * t;
    if (config.view_noise > 0.0) view += gaussian_matrix(n, d, rng, config.view_noise);
    slide.views.push_back(std::move(view));
  }
  return slide;
}

namespace {

void tally(Manifest& m, const std::vector<Slide>& slides, std::vector<Index>& counts,
           std::vector<int>& ids, Index classes) {
  counts.assign(static_cast<std::size_t>(classes), 0);
  for (const Slide& s : slides) {
    ids.push_back(s.id);
    ++counts[static_cast<std::size_t>(s.label)];
    const auto disc = static_cast<Index>(s.discriminative().size());
    m.discriminative_instances += disc;
    m.noisy_instances += s.size() - disc;
  }
}

Manifest build_manifest(const Dataset& ds) {
  Manifest m;
  m.config_hash = config_hash(ds.config);
  tally(m, ds.train, m.train_class_counts, m.train_ids, ds.config.classes);
  tally(m, ds.test, m.test_class_counts, m.test_ids, ds.config.classes);
  return m;
}

std::string slide_file(int id) {
  std::ostringstream os;
  os << "slide_" << std::setw(6) << std::setfill('0') << id << ".abxd";
  return os.str();
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

Dataset make_dataset(const DatasetConfig& config) {
  const SyntheticWorld world = make_world(config);
  const Index n = config.slides;
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  Rng split_rng(derive_seed(config.seed, 0x5EED));
  std::shuffle(ids.begin(), ids.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(std::lround(0.7 * static_cast<double>(n)));

  Dataset ds;
  ds.config = config;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const int id = ids[k];
    const int label = static_cast<int>(id % config.classes);
    Rng rng(derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(id)));
    Slide s = make_slide(config, world, id, label, rng);
    (k < n_train ? ds.train : ds.test).push_back(std::move(s));
  }
  ds.manifest = build_manifest(ds);
  return ds;
}

void write_slide(const fs::path& path, const Slide& slide) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  const Index n = slide.size();
  os.write("ABXD", 4);
  detail::put<std::uint32_t>(os, kSlideFormatVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(n));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(slide.raw_dim()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(slide.scales()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(slide.label));
  std::vector<std::uint8_t> bitmap(static_cast<std::size_t>((n + 7) / 8), 0);
  for (Index i = 0; i < n; ++i) {
    if (slide.roles[static_cast<std::size_t>(i)] == Role::Discriminative) {
      bitmap[static_cast<std::size_t>(i / 8)] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
  }
  os.write(reinterpret_cast<const char*>(bitmap.data()), static_cast<std::streamsize>(bitmap.size()));
  for (std::uint32_t r : slide.regions) detail::put<std::uint32_t>(os, r);
  detail::put_matrix(os, slide.latent);
  for (const Matrix& v : slide.views) detail::put_matrix(os, v);
  if (!os) throw IoError("write failed for " + path.string());
}

Slide read_slide(const fs::path& path, int id) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  detail::expect_magic(is, "ABXD", path.string());
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kSlideFormatVersion) {
    throw IoError(path.string() + ": unsupported slide format version " + std::to_string(version));
  }
  const auto n = static_cast<Index>(detail::get<std::uint32_t>(is, "instance count"));
  const auto d = static_cast<Index>(detail::get<std::uint32_t>(is, "raw dim"));
  const auto t = static_cast<Index>(detail::get<std::uint32_t>(is, "scale count"));
  Slide slide;
  slide.id = id;
  slide.label = static_cast<int>(detail::get<std::uint32_t>(is, "label"));
  std::vector<std::uint8_t> bitmap(static_cast<std::size_t>((n + 7) / 8));
  is.read(reinterpret_cast<char*>(bitmap.data()), static_cast<std::streamsize>(bitmap.size()));
  if (!is) throw IoError(path.string() + ": truncated role bitmap");
  slide.roles.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const bool disc = (bitmap[static_cast<std::size_t>(i / 8)] >> (i % 8)) & 1u;
    slide.roles[static_cast<std::size_t>(i)] = disc ? Role::Discriminative : Role::Noisy;
  }
  slide.regions.resize(static_cast<std::size_t>(n));
  for (auto& r : slide.regions) r = detail::get<std::uint32_t>(is, "region ids");
  slide.latent = detail::get_matrix(is, n, d, "latent");
  for (Index j = 0; j < t; ++j) slide.views.push_back(detail::get_matrix(is, n, d, "views"));
  return slide;
}

void save_dataset(const fs::path& dir, const Dataset& dataset, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + ": output directory is not empty (use --force)");
    fs::remove_all(dir / "train");
    fs::remove_all(dir / "test");
    fs::remove(dir / "manifest.json");
  }
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");

  json manifest;
  manifest["format"] = "abx-dataset";
  manifest["version"] = kSlideFormatVersion;
  manifest["config"] = to_json(dataset.config);
  manifest["config_hash"] = hex(config_hash(dataset.config));
  auto emit = [&](const std::vector<Slide>& slides, const char* split) {
    json list = json::array();
    for (const Slide& s : slides) {
      const std::string file = std::string(split) + "/" + slide_file(s.id);
      write_slide(dir / file, s);
      list.push_back({{"id", s.id},
                      {"label", s.label},
                      {"file", file},
                      {"instances", s.size()},
                      {"discriminative", s.discriminative().size()}});
    }
    manifest[split] = list;
  };
  emit(dataset.train, "train");
  emit(dataset.test, "test");
  const Manifest m = build_manifest(dataset);
  manifest["class_counts"] = {{"train", m.train_class_counts}, {"test", m.test_class_counts}};
  manifest["role_counts"] = {{"discriminative", m.discriminative_instances},
                             {"noisy", m.noisy_instances}};

  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw IoError("missing dataset manifest " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::parse_error& e) {
    throw IoError(manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  ds.config = dataset_config_from_json(manifest.at("config"));
  for (const json& e : manifest.at("train")) {
    ds.train.push_back(read_slide(dir / e.at("file").get<std::string>(), e.at("id").get<int>()));
  }
  for (const json& e : manifest.at("test")) {
    ds.test.push_back(read_slide(dir / e.at("file").get<std::string>(), e.at("id").get<int>()));
  }
  ds.manifest = build_manifest(ds);
  return ds;
}

}  // namespace abx
