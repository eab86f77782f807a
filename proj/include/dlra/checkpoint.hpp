#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dlra/error.hpp"
#include "dlra/tensor.hpp"

namespace dlra {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

// Flat container of named tensors with a fixed little-endian layout:
// magic "DLRA", u32 version, u32 entry count, then per entry
// u16 name length, name bytes, u8 dtype, u8 ndim, ndim u32 dims, payload.
// Entries serialize sorted by name so equal contents give equal bytes.
class Checkpoint {
public:
    struct Entry {
        Dtype dtype = Dtype::f32;
        std::vector<std::size_t> dims;
        std::vector<unsigned char> payload;  // little-endian element bytes
        std::size_t element_count() const;
    };

    static constexpr std::uint32_t kVersion = 1;

    void put_f32(const std::string& name, std::vector<std::size_t> dims, const std::vector<float>& data);
    void put_f64(const std::string& name, std::vector<std::size_t> dims, const std::vector<double>& data);
    void put_u8(const std::string& name, std::vector<std::size_t> dims, const std::vector<std::uint8_t>& data);
    void put_text(const std::string& name, const std::string& text);

    bool has(const std::string& name) const;
    std::size_t size() const { return entries_.size(); }
    std::vector<std::string> names() const;
    const Entry& entry(const std::string& name) const;

    std::vector<float> get_f32(const std::string& name) const;
    std::vector<double> get_f64(const std::string& name) const;
    std::vector<std::uint8_t> get_u8(const std::string& name) const;
    std::string get_text(const std::string& name) const;

    std::vector<unsigned char> serialize() const;
    static Checkpoint deserialize(const std::vector<unsigned char>& bytes);

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    std::map<std::string, Entry> entries_;
};

template <typename T>
void put_tensor(Checkpoint& ck, const std::string& name, const Tensor<T>& t) {
    if constexpr (std::is_same_v<T, float>)
        ck.put_f32(name, t.shape(), t.values());
    else
        ck.put_f64(name, t.shape(), t.values());
}

template <typename T>
Tensor<T> get_tensor(const Checkpoint& ck, const std::string& name) {
    const auto& e = ck.entry(name);
    std::vector<T> data;
    if (e.dtype == Dtype::f32) {
        auto raw = ck.get_f32(name);
        data.assign(raw.begin(), raw.end());
    } else if (e.dtype == Dtype::f64) {
        auto raw = ck.get_f64(name);
        data.assign(raw.begin(), raw.end());
    } else {
        throw DataError("entry '" + name + "' does not hold floating point data");
    }
    return Tensor<T>::from(e.dims, std::move(data));
}

}  // namespace dlra
