#include "bitivf/index.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <system_error>

#include "bitivf/error.hpp"

namespace bitivf {
namespace {

constexpr char kMagic[4] = {'B', 'I', 'V', 'F'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "index serialization assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    buf_.append(p, sizeof(T));
  }
  template <typename T>
  void put_array(std::span<const T> values) {
    buf_.append(reinterpret_cast<const char*>(values.data()),
                values.size_bytes());
  }
  std::string take() { return std::move(buf_); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* field) {
    T value;
    read_into(&value, sizeof(T), field);
    return value;
  }
  template <typename T>
  void get_array(std::vector<T>& out, std::size_t count, const char* field) {
    if (count > remaining() / sizeof(T)) truncated(field);
    out.resize(count);
    read_into(out.data(), count * sizeof(T), field);
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void read_into(void* dst, std::size_t n, const char* field) {
    if (n > remaining()) truncated(field);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  [[noreturn]] void truncated(const char* field) const {
    throw CorruptIndex(std::string("index truncated while reading ") + field +
                       " at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
bool same_bytes(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

bool same_bytes(const FloatMatrix& a, const FloatMatrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.empty() || std::memcmp(a.data(), b.data(),
                                   a.rows() * a.cols() * sizeof(float)) == 0);
}

}  // namespace

void IndexBlock::append(const QuantizedEntry& entry) {
  codes.insert(codes.end(), entry.code.begin(), entry.code.end());
  cx.push_back(entry.cx);
  residual_l1.push_back(entry.residual_l1);
  vector_ids.push_back(entry.vector_id);
}

std::size_t IvfRabitqIndex::list_size(ClusterId c) const {
  std::size_t n = 0;
  for (const auto& block : lists.at(c)) n += block.size();
  return n;
}

void IvfRabitqIndex::append(ClusterId c, const QuantizedEntry& entry) {
  if (c >= lists.size()) {
    throw InvalidArgument("append: cluster id " + std::to_string(c) +
                          " out of range");
  }
  if (entry.code.size() != code_stride()) {
    throw InvalidArgument("append: code width mismatch");
  }
  auto& list = lists[c];
  if (list.empty() || list.back().size() >= block_size) {
    list.push_back(IndexBlock{});
    list.back().cluster_id = c;
  }
  list.back().append(entry);
  ++total_vectors;
}

bool identical(const IvfRabitqIndex& a, const IvfRabitqIndex& b) {
  if (a.dim != b.dim || a.n_list != b.n_list || a.block_size != b.block_size ||
      a.total_vectors != b.total_vectors || a.seed != b.seed ||
      a.rotation.dim != b.rotation.dim ||
      !same_bytes(a.rotation.matrix, b.rotation.matrix) ||
      a.centroids.n_list != b.centroids.n_list ||
      a.centroids.dim != b.centroids.dim ||
      !same_bytes(a.centroids.matrix, b.centroids.matrix) ||
      a.lists.size() != b.lists.size()) {
    return false;
  }
  for (std::size_t c = 0; c < a.lists.size(); ++c) {
    if (a.lists[c].size() != b.lists[c].size()) return false;
    for (std::size_t k = 0; k < a.lists[c].size(); ++k) {
      const auto& x = a.lists[c][k];
      const auto& y = b.lists[c][k];
      if (x.cluster_id != y.cluster_id || !same_bytes(x.codes, y.codes) ||
          !same_bytes(x.cx, y.cx) || !same_bytes(x.residual_l1, y.residual_l1) ||
          !same_bytes(x.vector_ids, y.vector_ids)) {
        return false;
      }
    }
  }
  return true;
}

std::size_t auto_n_list(std::size_t n) {
  auto root = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (root * root < n) ++root;
  while (root > 0 && (root - 1) * (root - 1) >= n) --root;
  return std::max<std::size_t>(root, 1);
}

std::size_t resolve_n_list(const BuildConfig& config, std::size_t n) {
  return config.n_list == 0 ? auto_n_list(n) : config.n_list;
}

CoarseModel train_coarse(const FloatMatrix& raw, const BuildConfig& config) {
  if (config.block_size == 0) {
    throw InvalidArgument("build: block_size must be >= 1");
  }
  if (raw.cols() == 0) throw InvalidArgument("build: dimension must be >= 1");
  const std::size_t n = raw.rows();
  const std::size_t n_list = resolve_n_list(config, n);
  if (n < n_list) {
    throw InvalidArgument("build: " + std::to_string(n) + " vectors < nList " +
                          std::to_string(n_list));
  }
  if (!raw.all_finite()) {
    throw InvalidData("build: input contains NaN or Inf");
  }

  CoarseModel model;
  model.rotation = generate_rotation(raw.cols(), config.seed);

  const std::size_t train_rows = std::min(n, 256 * n_list);
  const auto sample = sample_indices(n, train_rows, config.seed + 1);
  const FloatMatrix train = rotate(model.rotation, raw.gather_rows(sample));
  model.centroids =
      kmeans(train, n_list, config.kmeans_max_iter, config.seed + 2);

  model.assignments.resize(n);
  const std::size_t batch = std::max<std::size_t>(config.assign_batch, 1);
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t count = std::min(batch, n - begin);
    const FloatMatrix rotated =
        rotate(model.rotation, raw.slice_rows(begin, count));
    const auto labels = assign_nearest(rotated, model.centroids.matrix, count);
    std::copy(labels.begin(), labels.end(),
              model.assignments.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return model;
}

IvfRabitqIndex make_empty_index(const CoarseModel& model,
                                const BuildConfig& config) {
  IvfRabitqIndex index;
  index.dim = model.rotation.dim;
  index.n_list = model.centroids.n_list;
  index.block_size = config.block_size;
  index.seed = config.seed;
  index.rotation = model.rotation;
  index.centroids = model.centroids;
  index.lists.resize(index.n_list);
  return index;
}

IvfRabitqIndex build(const FloatMatrix& raw, const BuildConfig& config) {
  const CoarseModel model = train_coarse(raw, config);
  IvfRabitqIndex index = make_empty_index(model, config);

  const std::size_t batch = std::max<std::size_t>(config.assign_batch, 1);
  std::vector<VectorId> ids;
  for (std::size_t begin = 0; begin < raw.rows(); begin += batch) {
    const std::size_t count = std::min(batch, raw.rows() - begin);
    ids.resize(count);
    std::iota(ids.begin(), ids.end(), static_cast<VectorId>(begin));
    const std::span<const ClusterId> labels(model.assignments.data() + begin,
                                            count);
    const auto entries = encode_batch(raw.slice_rows(begin, count),
                                      model.rotation, labels, model.centroids,
                                      ids);
    for (std::size_t i = 0; i < count; ++i) index.append(labels[i], entries[i]);
  }
  return index;
}

std::string serialize(const IvfRabitqIndex& index) {
  Writer w;
  w.put_array(std::span<const char>(kMagic, 4));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(index.dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(index.n_list));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(index.block_size));
  w.put<std::uint64_t>(index.total_vectors);
  w.put<std::uint64_t>(index.seed);
  w.put_array(index.rotation.matrix.values());
  w.put_array(index.centroids.matrix.values());
  for (const auto& list : index.lists) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(list.size()));
    for (const auto& block : list) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(block.size()));
      w.put_array(std::span<const VectorId>(block.vector_ids));
      w.put_array(std::span<const std::uint8_t>(block.codes));
      w.put_array(std::span<const float>(block.cx));
      w.put_array(std::span<const float>(block.residual_l1));
    }
  }
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.put<std::uint32_t>(crc);
  return w.take();
}

IvfRabitqIndex deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CorruptIndex("index magic mismatch: expected \"BIVF\"");
  }
  if (bytes.size() < 8) throw CorruptIndex("index truncated in version field");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kVersion) {
    throw CorruptIndex("index version " + std::to_string(version) +
                       " unsupported (expected 1)");
  }
  if (bytes.size() < 12) throw CorruptIndex("index truncated before checksum");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc32_of(bytes.data(), body) != stored) {
    throw CorruptIndex("index checksum mismatch (truncated or corrupted file)");
  }

  Reader r(bytes.first(body));
  r.get<std::uint32_t>("magic");
  r.get<std::uint32_t>("version");
  IvfRabitqIndex index;
  index.dim = r.get<std::uint32_t>("dim");
  index.n_list = r.get<std::uint32_t>("nList");
  index.block_size = r.get<std::uint32_t>("block_size");
  const auto n = r.get<std::uint64_t>("N");
  index.seed = r.get<std::uint64_t>("seed");
  if (index.dim == 0 && index.n_list != 0) {
    throw CorruptIndex("index header: zero dimension with non-empty lists");
  }

  std::vector<float> buf;
  r.get_array(buf, index.dim * index.dim, "rotation");
  index.rotation = {index.dim, FloatMatrix(index.dim, index.dim, std::move(buf))};
  buf = {};
  r.get_array(buf, index.n_list * index.dim, "centroids");
  index.centroids = {index.n_list, index.dim,
                     FloatMatrix(index.n_list, index.dim, std::move(buf))};

  const std::size_t stride = index.code_stride();
  index.lists.resize(index.n_list);
  std::uint64_t seen = 0;
  for (std::size_t c = 0; c < index.n_list; ++c) {
    const auto blocks = r.get<std::uint32_t>("block count");
    // Every block needs at least its length field.
    if (blocks > r.remaining() / 4) {
      throw CorruptIndex("index block count exceeds file size");
    }
    auto& list = index.lists[c];
    list.resize(blocks);
    for (auto& block : list) {
      block.cluster_id = static_cast<ClusterId>(c);
      const auto len = r.get<std::uint32_t>("block length");
      if (len > index.block_size) {
        throw CorruptIndex("index block length exceeds block_size");
      }
      r.get_array(block.vector_ids, len, "vector ids");
      r.get_array(block.codes, static_cast<std::size_t>(len) * stride, "codes");
      r.get_array(block.cx, len, "cx");
      r.get_array(block.residual_l1, len, "residual_l1");
      seen += len;
    }
  }
  if (r.remaining() != 0) {
    throw CorruptIndex("index has " + std::to_string(r.remaining()) +
                       " trailing bytes");
  }
  if (seen != n) {
    throw CorruptIndex("index header N=" + std::to_string(n) +
                       " disagrees with stored entries " + std::to_string(seen));
  }
  index.total_vectors = n;
  return index;
}

void save(const IvfRabitqIndex& index, const std::filesystem::path& path) {
  const std::string bytes = serialize(index);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

IvfRabitqIndex load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

IndexStats stats(const IvfRabitqIndex& index) {
  IndexStats s;
  s.n_list = index.n_list;
  s.total_vectors = index.total_vectors;
  s.list_sizes.assign(index.lists.size(), 0);
  s.list_blocks.assign(index.lists.size(), 0);
  for (std::size_t c = 0; c < index.lists.size(); ++c) {
    for (const auto& block : index.lists[c]) {
      s.list_sizes[c] += block.size();
      s.code_bytes += block.codes.size();
      s.constant_bytes += (block.cx.size() + block.residual_l1.size()) * sizeof(float);
      s.id_bytes += block.vector_ids.size() * sizeof(VectorId);
      s.metadata_bytes += sizeof(std::uint32_t) * 2;  // cluster id + length
    }
    s.list_blocks[c] = index.lists[c].size();
    s.total_blocks += index.lists[c].size();
  }
  s.metadata_bytes +=
      (index.rotation.matrix.rows() * index.rotation.matrix.cols() +
       index.centroids.matrix.rows() * index.centroids.matrix.cols()) *
      sizeof(float);
  s.memory_bytes = s.code_bytes + s.constant_bytes + s.id_bytes + s.metadata_bytes;
  return s;
}

}  // namespace bitivf
