#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace xmodal {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Modality : std::uint8_t { vis = 0, ir = 1 };

constexpr Modality other(Modality m) { return m == Modality::vis ? Modality::ir : Modality::vis; }
std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view tag);

// N feature rows with per-row modality and optional identity / camera tags.
// Immutable once constructed; the constructor enforces every invariant.
class EmbeddingSet {
 public:
  EmbeddingSet(RowMatrixF features, std::vector<Modality> modality,
               std::optional<std::vector<std::uint32_t>> true_id = std::nullopt,
               std::optional<std::vector<std::uint32_t>> camera = std::nullopt,
               bool normalized = false);

  std::size_t size() const { return static_cast<std::size_t>(features_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features_.cols()); }

  const RowMatrixF& features() const { return features_; }
  std::span<const float> row(std::size_t i) const {
    return {features_.data() + i * dim(), dim()};
  }
  const std::vector<Modality>& modality() const { return modality_; }
  Modality modality(std::size_t i) const { return modality_[i]; }
  const std::optional<std::vector<std::uint32_t>>& true_id() const { return true_id_; }
  const std::optional<std::vector<std::uint32_t>>& camera() const { return camera_; }
  bool normalized() const { return normalized_; }

  std::size_t count(Modality m) const;

  bool operator==(const EmbeddingSet& other) const;

 private:
  RowMatrixF features_;
  std::vector<Modality> modality_;
  std::optional<std::vector<std::uint32_t>> true_id_;
  std::optional<std::vector<std::uint32_t>> camera_;
  bool normalized_;
};

enum class FileFormat { binary, csv };

FileFormat format_from_path(const std::filesystem::path& path);

EmbeddingSet load(const std::filesystem::path& path, FileFormat format);
void save(const EmbeddingSet& set, const std::filesystem::path& path, FileFormat format);

// Unit-normalizes every row; throws DataError naming the first zero row.
EmbeddingSet l2_normalize(const EmbeddingSet& set);

// Returns `set` if already normalized, otherwise a normalized copy with a
// logged warning. Used by operations that assume unit rows.
EmbeddingSet ensure_normalized(const EmbeddingSet& set, std::string_view caller);

struct SubsetView {
  EmbeddingSet set;
  std::vector<std::size_t> parent_index;  // row i of `set` is parent row parent_index[i]
};

SubsetView subset_view(const EmbeddingSet& set, std::span<const std::size_t> indices);

// Indices of rows carrying modality `m`, ascending.
std::vector<std::size_t> rows_of(const EmbeddingSet& set, Modality m);

}  // namespace xmodal
