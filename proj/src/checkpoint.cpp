#include "flux/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

namespace flux {

namespace {

constexpr char kMagic[8] = {'F', 'L', 'U', 'X', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void append_le(std::vector<unsigned char>& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T read_le(const std::vector<unsigned char>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw ParseError("checkpoint: truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

void Checkpoint::put(const std::string& name, const Matrix& m) {
    if (has(name)) throw ParameterError("checkpoint: duplicate tensor '" + name + "'");
    entries_.push_back({name, {m.rows(), m.cols()}, payload_.size()});
    // Row-major order in the payload.
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) payload_.push_back(m(i, j));
}

void Checkpoint::put(const std::string& name, const Vector& v) {
    if (has(name)) throw ParameterError("checkpoint: duplicate tensor '" + name + "'");
    entries_.push_back({name, {v.size()}, payload_.size()});
    payload_.insert(payload_.end(), v.data(), v.data() + v.size());
}

void Checkpoint::put_scalar(const std::string& name, double v) {
    Vector s(1);
    s(0) = v;
    put(name, s);
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

const Checkpoint::Entry& Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e;
    throw DataError("checkpoint: missing tensor '" + name + "'");
}

Matrix Checkpoint::matrix(const std::string& name) const {
    const auto& e = find(name);
    if (e.shape.size() != 2) throw ParseError("checkpoint: '" + name + "' is not a matrix");
    Matrix m(e.shape[0], e.shape[1]);
    std::size_t k = e.offset;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = payload_[k++];
    return m;
}

Vector Checkpoint::vector(const std::string& name) const {
    const auto& e = find(name);
    if (e.shape.size() != 1) throw ParseError("checkpoint: '" + name + "' is not a vector");
    Vector v(e.shape[0]);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = payload_[e.offset + i];
    return v;
}

double Checkpoint::scalar(const std::string& name) const {
    Vector v = vector(name);
    if (v.size() != 1) throw ParseError("checkpoint: '" + name + "' is not a scalar");
    return v(0);
}

void Checkpoint::put_mlp(const std::string& prefix, const Mlp& mlp) {
    meta_["mlp"][prefix] = {{"layer_dims", mlp.layer_dims()}, {"activation", to_string(mlp.activation())}};
    put(prefix + ".params", mlp.params());
}

Mlp Checkpoint::mlp(const std::string& prefix) const {
    if (!meta_.contains("mlp") || !meta_["mlp"].contains(prefix))
        throw ParseError("checkpoint: missing mlp '" + prefix + "'");
    const auto& m = meta_["mlp"][prefix];
    Mlp net = Mlp::zeros(m.at("layer_dims").get<std::vector<int>>(),
                         activation_from_string(m.at("activation").get<std::string>()));
    Vector p = vector(prefix + ".params");
    if (p.size() != net.num_params()) throw ParseError("checkpoint: mlp '" + prefix + "' size mismatch");
    net.params() = p;
    return net;
}

std::vector<unsigned char> Checkpoint::serialize() const {
    nlohmann::json header;
    header["kind"] = kind_;
    header["meta"] = meta_;
    header["tensors"] = nlohmann::json::array();
    for (const auto& e : entries_)
        header["tensors"].push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
    header["payload_len"] = payload_.size();
    const std::string text = header.dump();

    std::vector<unsigned char> out(kMagic, kMagic + 8);
    append_le<std::uint32_t>(out, kVersion);
    append_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (double d : payload_) append_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(d));
    return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw ParseError("checkpoint: bad magic");
    std::size_t pos = 8;
    const auto version = read_le<std::uint32_t>(bytes, pos);
    if (version != kVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    const auto hlen = read_le<std::uint64_t>(bytes, pos);
    if (pos + hlen > bytes.size()) throw ParseError("checkpoint: truncated header");
    const std::string text(bytes.begin() + pos, bytes.begin() + pos + hlen);
    pos += hlen;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: header: ") + e.what());
    }
    Checkpoint c(header.at("kind").get<std::string>());
    c.meta_ = header.at("meta");
    const auto n = header.at("payload_len").get<std::size_t>();
    if (bytes.size() - pos != n * 8) throw ParseError("checkpoint: payload size mismatch");
    c.payload_.resize(n);
    for (std::size_t i = 0; i < n; ++i) c.payload_[i] = std::bit_cast<double>(read_le<std::uint64_t>(bytes, pos));
    for (const auto& t : header.at("tensors")) {
        Entry e{t.at("name").get<std::string>(), t.at("shape").get<std::vector<Eigen::Index>>(),
                t.at("offset").get<std::size_t>()};
        std::size_t count = 1;
        for (auto s : e.shape) count *= static_cast<std::size_t>(s);
        if (e.offset + count > n) throw ParseError("checkpoint: tensor '" + e.name + "' out of range");
        c.entries_.push_back(std::move(e));
    }
    return c;
}

std::string Checkpoint::save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("checkpoint: cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    return sha256_hex(bytes.data(), bytes.size());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot read " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

std::string Checkpoint::hash() const {
    const auto bytes = serialize();
    return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace flux
