#include "refface/tensor.hpp"

#include <sstream>

namespace refface {

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); i++) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

uint64_t hash_tensor(const Tensor& t, uint64_t h) {
    return fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
}

}  // namespace refface
