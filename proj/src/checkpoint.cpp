#include "imaml/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <memory>

#include "imaml/error.hpp"

namespace imaml {

namespace {

constexpr char kMagic[8] = {'I', 'M', 'A', 'M', 'L', 'C', 'K', '1'};
constexpr std::uint64_t kMaxCount = std::uint64_t{1} << 32;

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
        if (!out_) throw Error("checkpoint: cannot open '" + path + "' for writing");
    }
    void u64(std::uint64_t v) { raw(to_little(v)); }
    void f64(double v) { raw(to_little(v)); }
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void finish() {
        out_.flush();
        if (!out_) throw Error("checkpoint: write to '" + path_ + "' failed");
    }

private:
    template <typename T>
    void raw(T v) { bytes(&v, sizeof(T)); }
    std::ofstream out_;
    std::string path_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw Error("checkpoint: cannot open '" + path + "'");
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in_) throw Error("checkpoint: '" + path_ + "' is truncated");
    }
    std::uint64_t u64() { return to_little(raw<std::uint64_t>()); }
    double f64() { return to_little(raw<double>()); }
    std::uint64_t count(const char* what) {
        const auto n = u64();
        if (n > kMaxCount) throw Error("checkpoint: '" + path_ + "' has an implausible " + what + " " + std::to_string(n));
        return n;
    }
    std::string str(const char* what) {
        std::string s(count(what), '\0');
        bytes(s.data(), s.size());
        return s;
    }
    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    template <typename T>
    T raw() {
        T v;
        bytes(&v, sizeof(T));
        return v;
    }
    std::ifstream in_;
    std::string path_;
};

}  // namespace

void write_checkpoint(const std::string& path, const std::string& text, const ParamVector& values) {
    Writer w(path);
    w.bytes(kMagic, sizeof(kMagic));
    w.str(text);
    const auto& segs = values.layout().segments();
    w.u64(segs.size());
    for (const auto& s : segs) {
        w.str(s.name);
        w.u64(s.shape.size());
        for (auto d : s.shape) w.u64(d);
    }
    w.u64(values.size());
    for (double v : values.data()) w.f64(v);
    w.finish();
}

Checkpoint read_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw Error("checkpoint: '" + path + "' has a bad magic number");
    Checkpoint ck;
    ck.text = r.str("header length");
    auto layout = std::make_shared<ParamLayout>();
    const auto nseg = r.count("segment count");
    for (std::uint64_t i = 0; i < nseg; ++i) {
        std::string name = r.str("name length");
        ad::Shape shape(r.count("rank"));
        for (auto& d : shape) d = r.count("dimension");
        layout->add(std::move(name), std::move(shape));
    }
    const auto total = r.u64();
    if (total != layout->total()) {
        throw Error("checkpoint: '" + path + "' declares " + std::to_string(total) + " values but its segments hold " +
                    std::to_string(layout->total()));
    }
    std::vector<double> data(total);
    for (auto& v : data) v = r.f64();
    if (!r.at_end()) throw Error("checkpoint: '" + path + "' has trailing bytes");
    ck.values = ParamVector(std::move(layout), std::move(data));
    return ck;
}

}  // namespace imaml
