#include "fedprior/persistence.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <limits>

#include "fedprior/errors.hpp"

namespace fedprior::persist {
namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'V', 'T', '1'};
constexpr std::uint8_t kVersion = 1;

void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t& offset) : bytes_(bytes), off_(offset) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() < off_ || bytes_.size() - off_ < n) {
      throw FormatError(std::string("truncated ") + what, off_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[off_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes_[off_] | (bytes_[off_ + 1] << 8));
    off_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[off_ + i]) << (8 * i);
    off_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[off_ + i]) << (8 * i);
    off_ += 8;
    return v;
  }
  std::size_t offset() const { return off_; }
  void skip(std::size_t n) { off_ += n; }
  const std::uint8_t* here() const { return bytes_.data() + off_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t& off_;
};

void encode_header(Bytes& out, const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("cannot serialise a rank-0 tensor");
  const bool cplx = t.is_complex();
  const std::size_t nd = cplx ? t.rank() - 1 : t.rank();
  if (nd > 255) throw ShapeError("tensor rank exceeds 255");
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kVersion);
  out.push_back(cplx ? kDtypeComplex : kDtypeReal);
  out.push_back(static_cast<std::uint8_t>(nd));
  out.push_back(0);
  for (std::size_t i = 0; i < nd; ++i) {
    if (t.dim(i) > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("dimension exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  }
}

}  // namespace

namespace detail {

Bytes encode_tensor_as(const Tensor& t, HostOrder host) {
  Bytes out;
  encode_header(out, t);
  out.reserve(out.size() + 8 * t.size());
  for (double v : t.values()) {
    if (host == HostOrder::little) {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      // Big-endian host: native bytes are most-significant first.
      const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
      std::uint8_t native[8];
      for (int i = 0; i < 8; ++i) native[i] = static_cast<std::uint8_t>(u >> (8 * (7 - i)));
      std::reverse(std::begin(native), std::end(native));
      out.insert(out.end(), std::begin(native), std::end(native));
    }
  }
  return out;
}

}  // namespace detail

Bytes encode_tensor(const Tensor& t) { return detail::encode_tensor_as(t, detail::HostOrder::little); }

Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  Reader r(bytes, offset);
  r.need(4, "magic");
  if (std::memcmp(r.here(), kMagic, 4) != 0) throw FormatError("bad magic", r.offset());
  r.skip(4);
  const std::size_t version_at = r.offset();
  if (r.u8("version") != kVersion) throw FormatError("unsupported version", version_at);
  const std::size_t dtype_at = r.offset();
  const std::uint8_t dtype = r.u8("dtype");
  if (dtype != kDtypeReal && dtype != kDtypeComplex) throw FormatError("unknown dtype", dtype_at);
  const std::uint8_t nd = r.u8("ndim");
  const std::size_t reserved_at = r.offset();
  if (r.u8("reserved") != 0) throw FormatError("reserved byte is not zero", reserved_at);
  if (nd == 0) throw FormatError("zero rank", reserved_at - 1);
  Shape dims(nd);
  for (auto& d : dims) d = r.u32("dims");
  if (dtype == kDtypeComplex) dims.push_back(2);
  const std::size_t n = shape_size(dims);
  r.need(8 * n, "payload");
  std::vector<double> values(n);
  for (auto& v : values) v = std::bit_cast<double>(r.u64("payload"));
  Tensor t(std::move(dims), std::move(values));
  if (dtype == kDtypeComplex) t.set_complex(true);
  return t;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  Tensor t = decode_tensor(bytes, off);
  if (off != bytes.size()) throw FormatError("trailing bytes after tensor", off);
  return t;
}

Bytes encode_paramset(const ParamSet& p) {
  Bytes out;
  if (p.size() > std::numeric_limits<std::uint32_t>::max()) throw ContractError("too many entries");
  put_u32(out, static_cast<std::uint32_t>(p.size()));
  for (const auto& [path, t] : p) {
    if (path.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("path too long: " + path);
    put_u16(out, static_cast<std::uint16_t>(path.size()));
    out.insert(out.end(), path.begin(), path.end());
    const Bytes body = encode_tensor(t);
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

ParamSet decode_paramset(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  Reader r(bytes, off);
  const std::uint32_t count = r.u32("entry count");
  ParamSet p;
  std::string prev;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.offset();
    const std::uint16_t len = r.u16("path length");
    r.need(len, "path");
    std::string path(reinterpret_cast<const char*>(r.here()), len);
    r.skip(len);
    if (i > 0 && path == prev) throw FormatError("duplicate path " + path, entry_at);
    if (i > 0 && path < prev) throw FormatError("paths out of order at " + path, entry_at);
    Tensor t = decode_tensor(bytes, off);
    p.add(path, std::move(t));
    prev = std::move(path);
  }
  if (off != bytes.size()) throw FormatError("trailing bytes after container", off);
  return p;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename to " + path.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void save_tensor(const Tensor& t, const std::filesystem::path& path) { write_file(path, encode_tensor(t)); }
Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }
void save_paramset(const ParamSet& p, const std::filesystem::path& path) { write_file(path, encode_paramset(p)); }
ParamSet load_paramset(const std::filesystem::path& path) { return decode_paramset(read_file(path)); }

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += csv_field(fields[i]);
  }
  return line + "\r\n";
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace fedprior::persist
