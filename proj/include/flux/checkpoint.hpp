#pragma once

// Checkpoint container shared by all model stages.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "FLUXCKPT"
//   bytes 8..11   format version (u32, currently 1)
//   bytes 12..19  header length H in bytes (u64)
//   next H bytes  UTF-8 JSON header
//   remainder     payload of little-endian IEEE-754 float64 values
//
// The header holds a "kind" tag, free-form "meta" and a "tensors" list of
// {name, shape, offset} records. offset counts float64 elements from the
// start of the payload.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "flux/common.hpp"
#include "flux/nn.hpp"

namespace flux {

class Checkpoint {
public:
    explicit Checkpoint(std::string kind = "") : kind_(std::move(kind)) {}

    const std::string& kind() const { return kind_; }
    nlohmann::json& meta() { return meta_; }
    const nlohmann::json& meta() const { return meta_; }

    void put(const std::string& name, const Matrix& m);
    void put(const std::string& name, const Vector& v);
    void put_scalar(const std::string& name, double v);

    bool has(const std::string& name) const;
    Matrix matrix(const std::string& name) const;
    Vector vector(const std::string& name) const;
    double scalar(const std::string& name) const;

    // Nests an Mlp under `prefix` (dims and activation go into meta).
    void put_mlp(const std::string& prefix, const Mlp& mlp);
    Mlp mlp(const std::string& prefix) const;

    std::vector<unsigned char> serialize() const;
    static Checkpoint deserialize(const std::vector<unsigned char>& bytes);

    // Writes the file and returns its SHA-256 hex digest.
    std::string save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

    // SHA-256 of the serialized bytes.
    std::string hash() const;

private:
    struct Entry {
        std::string name;
        std::vector<Eigen::Index> shape;
        std::size_t offset;
    };
    const Entry& find(const std::string& name) const;

    std::string kind_;
    nlohmann::json meta_ = nlohmann::json::object();
    std::vector<Entry> entries_;
    std::vector<double> payload_;
};

std::string sha256_hex(const void* data, std::size_t n);
std::string sha256_hex(const std::string& s);

}  // namespace flux
