#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "dlab/denoiser.hpp"
#include "dlab/error.hpp"

// Layout (all integers and floats little-endian):
//   "DNLB" | u32 version | u32 channels rows cols d hidden token_len token_dim
//   | u64 init seed | u64 train_step | u32 len + RNG state text
//   | u32 tensor count | per tensor: u16 name len, name, u32 rows, u32 cols,
//   rows*cols f32 in column-major order

namespace dlab {

namespace {

constexpr char kMagic[4] = {'D', 'N', 'L', 'B'};

class Writer {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_integral_v<T> || std::is_same_v<T, float>);
        using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                     std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
        U bits = std::bit_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}

    template <typename T>
    T get(const char* what) {
        using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                     std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
        need(sizeof(U), what);
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            bits |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return std::bit_cast<T>(bits);
    }
    std::string text(std::size_t n, const char* what) {
        need(n, what);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (pos_ + n > buf_.size()) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
        }
    }

    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const DenoiserModel& m, const std::string& path) {
    Writer w;
    w.bytes(kMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    const auto& h = m.hyper;
    for (int v : {h.channels, h.rows, h.cols, h.d, h.hidden, h.token_len, h.token_dim}) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    }
    w.put<std::uint64_t>(h.seed);
    w.put<std::uint64_t>(m.train_step);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rng_state.size()));
    w.bytes(m.rng_state.data(), m.rng_state.size());

    std::uint32_t count = 0;
    m.params.visit([&](const char*, const Mat<float>&) { ++count; });
    w.put<std::uint32_t>(count);
    m.params.visit([&](const char* name, const Mat<float>& t) {
        std::size_t len = std::strlen(name);
        w.put<std::uint16_t>(static_cast<std::uint16_t>(len));
        w.bytes(name, len);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rows()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.cols()));
        for (Eigen::Index i = 0; i < t.size(); ++i) w.put<float>(t.data()[i]);
    });

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint " + path + " for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw DataError("short write to checkpoint " + path);
}

DenoiserModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("checkpoint not found: " + path + " (run `lab train` first)");
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

    std::string magic = r.text(4, "magic");
    if (magic != std::string(kMagic, 4)) throw FormatError("bad checkpoint magic in " + path, 0);
    auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")",
                          4);
    }

    DenoiserModel m;
    auto& h     = m.hyper;
    h.channels  = static_cast<int>(r.get<std::uint32_t>("hyperparameters"));
    h.rows      = static_cast<int>(r.get<std::uint32_t>("hyperparameters"));
    h.cols      = static_cast<int>(r.get<std::uint32_t>("hyperparameters"));
    h.d         = static_cast<int>(r.get<std::uint32_t>("hyperparameters"));
    h.hidden    = static_cast<int>(r.get<std::uint32_t>("hyperparameters"));
    h.token_len = static_cast<int>(r.get<std::uint32_t>("hyperparameters"));
    h.token_dim = static_cast<int>(r.get<std::uint32_t>("hyperparameters"));
    h.seed      = r.get<std::uint64_t>("hyperparameters");
    m.train_step = r.get<std::uint64_t>("train step");
    auto rng_len = r.get<std::uint32_t>("rng state length");
    m.rng_state  = r.text(rng_len, "rng state");

    // Expected shapes come from a fresh init with the stored hyperparameters.
    DenoiserModel shape_ref = init_model(h);
    auto count = r.get<std::uint32_t>("tensor count");
    std::uint32_t expected = 0;
    shape_ref.params.visit([&](const char*, const Mat<float>&) { ++expected; });
    if (count != expected) {
        throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                              std::to_string(expected),
                          r.offset() - 4);
    }
    m.params = shape_ref.params;
    m.params.visit([&](const char* name, Mat<float>& t) {
        std::size_t at = r.offset();
        auto len       = r.get<std::uint16_t>("tensor name length");
        std::string nm = r.text(len, "tensor name");
        auto rows      = r.get<std::uint32_t>("tensor rows");
        auto cols      = r.get<std::uint32_t>("tensor cols");
        if (nm != name || rows != t.rows() || cols != t.cols()) {
            throw FormatError("tensor '" + nm + "' does not match expected '" + name + "' " +
                                  std::to_string(t.rows()) + "x" + std::to_string(t.cols()),
                              at);
        }
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = r.get<float>("tensor data");
    });
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint tensors", r.offset());
    return m;
}

}  // namespace dlab
