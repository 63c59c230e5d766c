#include "xmodal/embed_store.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "xmodal/error.hpp"
#include "xmodal/log.hpp"

namespace xmodal {

namespace {

constexpr std::array<char, 4> kMagic = {'X', 'M', 'A', '1'};
constexpr std::uint8_t kHasId = 1u << 0;
constexpr std::uint8_t kHasCamera = 1u << 1;
constexpr std::uint8_t kNormalized = 1u << 2;
constexpr double kUnitTolerance = 1e-6;

double row_norm(const float* row, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(row[k]) * row[k];
  return std::sqrt(s);
}

bool all_rows_unit(const RowMatrixF& f) {
  const auto d = static_cast<std::size_t>(f.cols());
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    if (std::abs(row_norm(f.data() + i * d, d) - 1.0) > kUnitTolerance) return false;
  }
  return true;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                 static_cast<char>((v >> 16) & 0xff),
                                 static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw DataError(std::string("truncated binary embedding file while reading ") + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& out, float v) {
  std::uint32_t bits = 0;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  put_u32(out, bits);
}

float get_f32(std::istream& in) {
  const std::uint32_t bits = get_u32(in, "features");
  float v = 0.0f;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::uint32_t parse_u32(const std::string& s, std::size_t line_no) {
  std::uint32_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("line " + std::to_string(line_no) + ": invalid unsigned integer '" + s + "'");
  }
  return v;
}

EmbeddingSet load_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) {
    throw DataError("malformed header in " + path.string() + ": bad magic");
  }
  const std::uint32_t n = get_u32(in, "N");
  const std::uint32_t d = get_u32(in, "d");
  char flag_byte = 0;
  if (!in.get(flag_byte)) throw DataError("malformed header in " + path.string() + ": no flags");
  const auto flags = static_cast<std::uint8_t>(flag_byte);
  if ((flags & ~(kHasId | kHasCamera | kNormalized)) != 0) {
    throw DataError("malformed header in " + path.string() + ": unknown flag bits");
  }
  if (n == 0) throw DataError("empty embedding set in " + path.string());
  if (d < 2) throw DataError("malformed header in " + path.string() + ": d < 2");

  RowMatrixF features(n, d);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t k = 0; k < d; ++k) features(i, k) = get_f32(in);
  }
  std::vector<Modality> modality(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    char b = 0;
    if (!in.get(b)) throw DataError("truncated binary embedding file while reading modality");
    if (b != 0 && b != 1) {
      throw DataError("unknown modality tag " + std::to_string(static_cast<int>(b)) + " at row " +
                      std::to_string(i));
    }
    modality[i] = static_cast<Modality>(b);
  }
  std::optional<std::vector<std::uint32_t>> ids;
  std::optional<std::vector<std::uint32_t>> cams;
  if (flags & kHasId) {
    ids.emplace(n);
    for (auto& v : *ids) v = get_u32(in, "true_id");
  }
  if (flags & kHasCamera) {
    cams.emplace(n);
    for (auto& v : *cams) v = get_u32(in, "camera");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("trailing bytes after embedding payload in " + path.string());
  }
  return EmbeddingSet(std::move(features), std::move(modality), std::move(ids), std::move(cams),
                      (flags & kNormalized) != 0);
}

void save_binary(const EmbeddingSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(set.size()));
  put_u32(out, static_cast<std::uint32_t>(set.dim()));
  std::uint8_t flags = 0;
  if (set.true_id()) flags |= kHasId;
  if (set.camera()) flags |= kHasCamera;
  if (set.normalized()) flags |= kNormalized;
  out.put(static_cast<char>(flags));
  const float* data = set.features().data();
  for (std::size_t i = 0; i < set.size() * set.dim(); ++i) put_f32(out, data[i]);
  for (Modality m : set.modality()) out.put(static_cast<char>(m));
  if (set.true_id()) {
    for (auto v : *set.true_id()) put_u32(out, v);
  }
  if (set.camera()) {
    for (auto v : *set.camera()) put_u32(out, v);
  }
  if (!out) throw DataError("I/O failure writing " + path.string());
}

EmbeddingSet load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("malformed header in " + path.string() + ": empty file");
  const auto header = split_csv_line(line);
  std::size_t d = 0;
  while (d < header.size() && header[d] == "f" + std::to_string(d)) ++d;
  if (d < 2 || d >= header.size() || header[d] != "modality") {
    throw DataError("malformed header in " + path.string() +
                    ": expected f0..f{d-1},modality[,id][,camera] with d >= 2");
  }
  bool has_id = false;
  bool has_cam = false;
  std::size_t pos = d + 1;
  if (pos < header.size() && header[pos] == "id") {
    has_id = true;
    ++pos;
  }
  if (pos < header.size() && header[pos] == "camera") {
    has_cam = true;
    ++pos;
  }
  if (pos != header.size()) {
    throw DataError("malformed header in " + path.string() + ": unexpected column '" + header[pos] + "'");
  }
  const std::size_t width = pos;

  std::vector<float> values;
  std::vector<Modality> modality;
  std::vector<std::uint32_t> ids;
  std::vector<std::uint32_t> cams;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != width) {
      throw DataError("row-length mismatch at line " + std::to_string(line_no) + ": expected " +
                      std::to_string(width) + " values, got " + std::to_string(cells.size()));
    }
    for (std::size_t k = 0; k < d; ++k) {
      float v = 0.0f;
      const auto& s = cells[k];
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size()) {
        // from_chars does not accept "nan"/"inf" spellings uniformly; treat any
        // unparseable or non-finite token as a data error.
        throw DataError("line " + std::to_string(line_no) + ": invalid feature value '" + s + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError("line " + std::to_string(line_no) + ": NaN/Inf feature value");
      }
      values.push_back(v);
    }
    try {
      modality.push_back(modality_from_string(cells[d]));
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (has_id) ids.push_back(parse_u32(cells[d + 1], line_no));
    if (has_cam) cams.push_back(parse_u32(cells[d + 1 + (has_id ? 1 : 0)], line_no));
  }
  const std::size_t n = modality.size();
  if (n == 0) throw DataError("empty embedding set in " + path.string());
  RowMatrixF features = Eigen::Map<RowMatrixF>(values.data(), static_cast<Eigen::Index>(n),
                                               static_cast<Eigen::Index>(d));
  const bool unit = all_rows_unit(features);
  std::optional<std::vector<std::uint32_t>> opt_ids;
  std::optional<std::vector<std::uint32_t>> opt_cams;
  if (has_id) opt_ids = std::move(ids);
  if (has_cam) opt_cams = std::move(cams);
  return EmbeddingSet(std::move(features), std::move(modality), std::move(opt_ids),
                      std::move(opt_cams), unit);
}

void save_csv(const EmbeddingSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t k = 0; k < set.dim(); ++k) out << 'f' << k << ',';
  out << "modality";
  if (set.true_id()) out << ",id";
  if (set.camera()) out << ",camera";
  out << '\n';
  std::array<char, 64> buf{};
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (float v : set.row(i)) {
      auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
      out.write(buf.data(), ptr - buf.data());
      out << ',';
    }
    out << to_string(set.modality(i));
    if (set.true_id()) out << ',' << (*set.true_id())[i];
    if (set.camera()) out << ',' << (*set.camera())[i];
    out << '\n';
  }
  if (!out) throw DataError("I/O failure writing " + path.string());
}

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::vis ? "VIS" : "IR"; }

Modality modality_from_string(std::string_view tag) {
  if (tag == "VIS" || tag == "vis" || tag == "0") return Modality::vis;
  if (tag == "IR" || tag == "ir" || tag == "1") return Modality::ir;
  throw DataError("unknown modality tag '" + std::string(tag) + "'");
}

EmbeddingSet::EmbeddingSet(RowMatrixF features, std::vector<Modality> modality,
                           std::optional<std::vector<std::uint32_t>> true_id,
                           std::optional<std::vector<std::uint32_t>> camera, bool normalized)
    : features_(std::move(features)),
      modality_(std::move(modality)),
      true_id_(std::move(true_id)),
      camera_(std::move(camera)),
      normalized_(normalized) {
  const auto n = static_cast<std::size_t>(features_.rows());
  if (n == 0) throw DataError("empty embedding set (N = 0)");
  if (features_.cols() < 2) throw DataError("embedding dimension must be >= 2");
  if (modality_.size() != n) {
    throw DataError("modality vector length " + std::to_string(modality_.size()) +
                    " does not match N = " + std::to_string(n));
  }
  for (Modality m : modality_) {
    if (m != Modality::vis && m != Modality::ir) throw DataError("unknown modality tag");
  }
  if (true_id_ && true_id_->size() != n) throw DataError("true_id length does not match N");
  if (camera_ && camera_->size() != n) throw DataError("camera length does not match N");
  if (!features_.allFinite()) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!features_.row(static_cast<Eigen::Index>(i)).allFinite()) {
        throw DataError("NaN/Inf feature in row " + std::to_string(i));
      }
    }
  }
  if (normalized_ && !all_rows_unit(features_)) {
    throw DataError("normalized flag set but a row is not unit-norm within 1e-6");
  }
}

std::size_t EmbeddingSet::count(Modality m) const {
  return static_cast<std::size_t>(std::count(modality_.begin(), modality_.end(), m));
}

bool EmbeddingSet::operator==(const EmbeddingSet& other) const {
  if (features_.rows() != other.features_.rows() || features_.cols() != other.features_.cols()) {
    return false;
  }
  // Bitwise comparison so that round-trips are checked exactly.
  const auto bytes = static_cast<std::size_t>(features_.size()) * sizeof(float);
  return std::memcmp(features_.data(), other.features_.data(), bytes) == 0 &&
         modality_ == other.modality_ && true_id_ == other.true_id_ && camera_ == other.camera_ &&
         normalized_ == other.normalized_;
}

FileFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? FileFormat::csv : FileFormat::binary;
}

EmbeddingSet load(const std::filesystem::path& path, FileFormat format) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path.string());
  return format == FileFormat::binary ? load_binary(path) : load_csv(path);
}

void save(const EmbeddingSet& set, const std::filesystem::path& path, FileFormat format) {
  if (format == FileFormat::binary) {
    save_binary(set, path);
  } else {
    save_csv(set, path);
  }
}

EmbeddingSet l2_normalize(const EmbeddingSet& set) {
  RowMatrixF f = set.features();
  const std::size_t d = set.dim();
  for (std::size_t i = 0; i < set.size(); ++i) {
    float* row = f.data() + i * d;
    const double norm = row_norm(row, d);
    if (norm == 0.0) throw DataError("cannot normalize zero-norm row " + std::to_string(i));
    // Rows already unit to float precision are left untouched so that
    // normalization is idempotent bit for bit.
    if (std::abs(norm - 1.0) <= 4.0 * std::numeric_limits<float>::epsilon()) continue;
    for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<float>(row[k] / norm);
  }
  return EmbeddingSet(std::move(f), set.modality(), set.true_id(), set.camera(), true);
}

EmbeddingSet ensure_normalized(const EmbeddingSet& set, std::string_view caller) {
  if (set.normalized()) return set;
  log::warn(std::string(caller) + ": input set is not normalized; normalizing");
  return l2_normalize(set);
}

SubsetView subset_view(const EmbeddingSet& set, std::span<const std::size_t> indices) {
  const std::size_t n = set.size();
  std::vector<char> seen(n, 0);
  for (std::size_t idx : indices) {
    if (idx >= n) {
      throw UsageError("subset index " + std::to_string(idx) + " out of range for N = " +
                       std::to_string(n));
    }
    if (seen[idx]) throw UsageError("duplicate subset index " + std::to_string(idx));
    seen[idx] = 1;
  }
  const auto m = static_cast<Eigen::Index>(indices.size());
  RowMatrixF f(m, static_cast<Eigen::Index>(set.dim()));
  std::vector<Modality> mod(indices.size());
  std::optional<std::vector<std::uint32_t>> ids;
  std::optional<std::vector<std::uint32_t>> cams;
  if (set.true_id()) ids.emplace(indices.size());
  if (set.camera()) cams.emplace(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    f.row(static_cast<Eigen::Index>(r)) = set.features().row(static_cast<Eigen::Index>(src));
    mod[r] = set.modality(src);
    if (ids) (*ids)[r] = (*set.true_id())[src];
    if (cams) (*cams)[r] = (*set.camera())[src];
  }
  return SubsetView{EmbeddingSet(std::move(f), std::move(mod), std::move(ids), std::move(cams),
                                 set.normalized()),
                    std::vector<std::size_t>(indices.begin(), indices.end())};
}

std::vector<std::size_t> rows_of(const EmbeddingSet& set, Modality m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.modality(i) == m) out.push_back(i);
  }
  return out;
}

}  // namespace xmodal
