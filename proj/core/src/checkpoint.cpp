#include "egformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace egf {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw IoError(std::string("checkpoint truncated while reading ") + what + " at byte offset " +
                    std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out = "EGTN";
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& nt : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
    out += nt.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t e : nt.tensor.shape()) put_le<std::uint64_t>(out, e);
    for (double v : nt.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != "EGTN") throw IoError("checkpoint: bad magic at byte offset 0");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version) +
                  " at byte offset 4");
  }
  const auto count = in.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = in.get<std::uint32_t>("name length");
    std::string name = in.take(name_len, "name");
    const std::size_t rank_at = in.pos();
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) {
      throw IoError("checkpoint: implausible rank " + std::to_string(rank) + " at byte offset " +
                    std::to_string(rank_at));
    }
    Shape shape(rank);
    for (auto& e : shape) {
      const std::size_t at = in.pos();
      e = static_cast<std::size_t>(in.get<std::uint64_t>("extent"));
      if (e == 0 || e > (std::uint64_t{1} << 32)) {
        throw IoError("checkpoint: invalid extent at byte offset " + std::to_string(at));
      }
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = std::bit_cast<double>(in.get<std::uint64_t>("payload"));
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  if (!in.done()) {
    throw IoError("checkpoint: trailing bytes at byte offset " + std::to_string(in.pos()));
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace egf
