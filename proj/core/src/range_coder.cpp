#include "tiltlab/range_coder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace tiltlab {

namespace {

constexpr int kCodeBits = 62;
constexpr std::uint64_t kTopValue = (1ULL << kCodeBits) - 1;  // inclusive high
constexpr std::uint64_t kHalf = 1ULL << (kCodeBits - 1);
constexpr std::uint64_t kQuarter = 1ULL << (kCodeBits - 2);
constexpr std::uint64_t kThreeQuarters = kHalf + kQuarter;
constexpr std::uint64_t kFreqTotal = 1ULL << 32;

class BitWriter {
 public:
  void put(int bit) {
    if ((count_ & 7) == 0) bytes_.push_back(0);
    if (bit) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (count_ & 7));
    ++count_;
  }
  std::vector<std::uint8_t> take_bytes() { return std::move(bytes_); }
  std::uint64_t bit_count() const { return count_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint64_t count_ = 0;
};

class BitReader {
 public:
  BitReader(const std::vector<std::uint8_t>& bytes, std::uint64_t bit_length)
      : bytes_(bytes), bit_length_(bit_length) {}

  // Bits past the stream read as 0 (the flush guarantees decodability).
  int next() {
    if (pos_ >= bit_length_) {
      ++pos_;
      return 0;
    }
    const int bit = (bytes_[pos_ >> 3] >> (7 - (pos_ & 7))) & 1;
    ++pos_;
    return bit;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::uint64_t bit_length_;
  std::uint64_t pos_ = 0;
};

class ArithmeticEncoder {
 public:
  void encode(std::uint64_t cum_low, std::uint64_t cum_high) {
    const unsigned __int128 range =
        static_cast<unsigned __int128>(high_ - low_) + 1;
    high_ = low_ + static_cast<std::uint64_t>(range * cum_high / kFreqTotal) - 1;
    low_ = low_ + static_cast<std::uint64_t>(range * cum_low / kFreqTotal);
    for (;;) {
      if (high_ < kHalf) {
        emit(0);
      } else if (low_ >= kHalf) {
        emit(1);
        low_ -= kHalf;
        high_ -= kHalf;
      } else if (low_ >= kQuarter && high_ < kThreeQuarters) {
        ++pending_;
        low_ -= kQuarter;
        high_ -= kQuarter;
      } else {
        break;
      }
      low_ <<= 1;
      high_ = (high_ << 1) | 1;
    }
  }

  void flush() {
    ++pending_;
    emit(low_ >= kQuarter ? 1 : 0);
  }

  BitWriter& writer() { return writer_; }

 private:
  void emit(int bit) {
    writer_.put(bit);
    for (; pending_ > 0; --pending_) writer_.put(!bit);
  }

  std::uint64_t low_ = 0;
  std::uint64_t high_ = kTopValue;
  std::uint64_t pending_ = 0;
  BitWriter writer_;
};

class ArithmeticDecoder {
 public:
  explicit ArithmeticDecoder(BitReader& reader) : reader_(reader) {
    for (int i = 0; i < kCodeBits; ++i) value_ = (value_ << 1) | reader_.next();
  }

  // Returns a target in [0, kFreqTotal) locating the symbol's cumulative bin.
  std::uint64_t target() const {
    const unsigned __int128 range =
        static_cast<unsigned __int128>(high_ - low_) + 1;
    const unsigned __int128 off =
        (static_cast<unsigned __int128>(value_ - low_) + 1) * kFreqTotal - 1;
    return static_cast<std::uint64_t>(off / range);
  }

  void consume(std::uint64_t cum_low, std::uint64_t cum_high) {
    const unsigned __int128 range =
        static_cast<unsigned __int128>(high_ - low_) + 1;
    high_ = low_ + static_cast<std::uint64_t>(range * cum_high / kFreqTotal) - 1;
    low_ = low_ + static_cast<std::uint64_t>(range * cum_low / kFreqTotal);
    for (;;) {
      if (high_ < kHalf) {
        // nothing
      } else if (low_ >= kHalf) {
        low_ -= kHalf;
        high_ -= kHalf;
        value_ -= kHalf;
      } else if (low_ >= kQuarter && high_ < kThreeQuarters) {
        low_ -= kQuarter;
        high_ -= kQuarter;
        value_ -= kQuarter;
      } else {
        break;
      }
      low_ <<= 1;
      high_ = (high_ << 1) | 1;
      value_ = (value_ << 1) | reader_.next();
    }
  }

 private:
  BitReader& reader_;
  std::uint64_t low_ = 0;
  std::uint64_t high_ = kTopValue;
  std::uint64_t value_ = 0;
};

}  // namespace

std::vector<std::uint64_t> quantize_row(std::span<const double> row) {
  const std::size_t n = row.size();
  std::vector<std::uint64_t> freq(n, 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  remainders.reserve(n);
  unsigned __int128 assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ideal = row[i] * static_cast<double>(kFreqTotal);
    const double fl = std::floor(ideal);
    freq[i] = static_cast<std::uint64_t>(fl);
    assigned += freq[i];
    remainders.emplace_back(ideal - fl, i);
  }
  // Largest remainder first; index breaks ties deterministically.
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::int64_t deficit =
      static_cast<std::int64_t>(static_cast<unsigned __int128>(kFreqTotal) - assigned);
  for (std::size_t k = 0; deficit > 0; k = (k + 1) % n, --deficit) {
    ++freq[remainders[k].second];
  }
  for (; deficit < 0; ++deficit) {
    const std::size_t top =
        std::max_element(freq.begin(), freq.end()) - freq.begin();
    --freq[top];
  }
  // Nonzero probabilities must stay codable.
  for (std::size_t i = 0; i < n; ++i) {
    if (row[i] > 0.0 && freq[i] == 0) {
      const std::size_t top =
          std::max_element(freq.begin(), freq.end()) - freq.begin();
      --freq[top];
      ++freq[i];
    }
  }
  return freq;
}

namespace {

struct CumRow {
  std::vector<std::uint64_t> cum;  // size n+1, cum[n] == kFreqTotal
};

CumRow cumulative(std::span<const double> row) {
  const auto freq = quantize_row(row);
  CumRow out;
  out.cum.assign(freq.size() + 1, 0);
  for (std::size_t i = 0; i < freq.size(); ++i) out.cum[i + 1] = out.cum[i] + freq[i];
  return out;
}

void validate_response(const Response& z, const ModelState& q) {
  if (std::cmp_greater(z.size(), q.depth())) fail(ErrorCode::InvalidPath, "response overlength");
  for (std::int32_t a : z) {
    if (a < 0 || a >= q.vocab()) fail(ErrorCode::InvalidPath, "token index out of range");
  }
}

}  // namespace

CodedMessage encode(const Response& z, const ModelState& q) {
  validate_response(z, q);

  ArithmeticEncoder enc;
  std::int64_t rank = 0;
  std::uint32_t symbols = 0;
  auto emit_symbol = [&](std::int32_t sym) {
    const auto row = q.row(rank);
    if (!(row[sym] > 0.0)) fail(ErrorCode::ZeroProbability, "zero conditional along path");
    const CumRow c = cumulative(row);
    enc.encode(c.cum[sym], c.cum[sym + 1]);
    ++symbols;
  };
  for (std::size_t i = 0; i < z.size(); ++i) {
    emit_symbol(z[i]);
    if (i + 1 < static_cast<std::size_t>(q.depth()))
      rank = q.shape().child_rank(rank, static_cast<std::int32_t>(i), z[i]);
  }
  if (std::cmp_less(z.size(), q.depth())) emit_symbol(q.vocab());
  enc.flush();

  CodedMessage msg;
  msg.bit_length = enc.writer().bit_count();
  msg.bytes = enc.writer().take_bytes();
  msg.symbol_count = symbols;
  msg.model_id = q.content_hash();
  return msg;
}

Response decode(const CodedMessage& msg, const ModelState& q) {
  if (msg.model_id != q.content_hash())
    fail(ErrorCode::ModelMismatch, "message was encoded under a different model");

  BitReader reader(msg.bytes, msg.bit_length);
  ArithmeticDecoder dec(reader);
  Response z;
  std::int64_t rank = 0;
  bool saw_eos = false;
  for (std::uint32_t i = 0; i < msg.symbol_count; ++i) {
    if (saw_eos || std::cmp_equal(z.size(), q.depth()))
      fail(ErrorCode::CorruptStream, "stream continues past termination");
    const auto row = q.row(rank);
    const CumRow c = cumulative(row);
    const std::uint64_t t = dec.target();
    const auto it = std::upper_bound(c.cum.begin() + 1, c.cum.end(), t);
    const auto sym = static_cast<std::int32_t>(it - c.cum.begin() - 1);
    dec.consume(c.cum[sym], c.cum[sym + 1]);
    if (sym == q.vocab()) {
      saw_eos = true;
    } else {
      z.push_back(sym);
      if (std::cmp_less(z.size(), q.depth()))
        rank = q.shape().child_rank(rank, static_cast<std::int32_t>(z.size()) - 1, sym);
    }
  }
  if (!saw_eos && std::cmp_less(z.size(), q.depth()))
    fail(ErrorCode::CorruptStream, "stream exhausts before EOS or depth cut");
  if (saw_eos && std::cmp_equal(z.size(), q.depth()))
    fail(ErrorCode::CorruptStream, "EOS after depth cut");
  return z;
}

// ============================================================================
// File format: TILTCODE | BE symbol_count | model id | byte-padded bitstream
// ============================================================================

namespace {

constexpr char kMagic[8] = {'T', 'I', 'L', 'T', 'C', 'O', 'D', 'E'};

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_be64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_be64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

std::vector<std::uint8_t> CodedMessage::to_bytes() const {
  std::vector<std::uint8_t> out;
  out.reserve(28 + bytes.size());
  out.insert(out.end(), kMagic, kMagic + 8);
  put_be32(out, symbol_count);
  put_be64(out, model_id[0]);
  put_be64(out, model_id[1]);
  out.insert(out.end(), bytes.begin(), bytes.end());
  return out;
}

CodedMessage CodedMessage::from_bytes(const std::vector<std::uint8_t>& data) {
  if (data.size() < 28 || std::memcmp(data.data(), kMagic, 8) != 0)
    fail(ErrorCode::CorruptStream, "bad message header");
  CodedMessage msg;
  msg.symbol_count = 0;
  for (int i = 0; i < 4; ++i) msg.symbol_count = (msg.symbol_count << 8) | data[8 + i];
  msg.model_id[0] = get_be64(data.data() + 12);
  msg.model_id[1] = get_be64(data.data() + 20);
  msg.bytes.assign(data.begin() + 28, data.end());
  msg.bit_length = static_cast<std::uint64_t>(msg.bytes.size()) * 8;
  return msg;
}

}  // namespace tiltlab
