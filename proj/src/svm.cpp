#include "pandora/svm.hpp"

#include <algorithm>
#include <cstring>

namespace pandora::svm {

using pbf::kPermExec;
using pbf::kPermRead;
using pbf::kPermWrite;

namespace {

constexpr uint32_t kPage = pbf::kPageSize;
constexpr uint32_t kErr = 0xFFFFFFFFu;  // syscall error return

uint32_t page_base(uint32_t addr) { return addr & ~(kPage - 1); }

uint32_t round_up_pages(uint64_t size) {
  return static_cast<uint32_t>((size + kPage - 1) & ~uint64_t(kPage - 1));
}

}  // namespace

const char* fault_reason_name(FaultReason r) {
  switch (r) {
    case FaultReason::ExecFault: return "exec-fault";
    case FaultReason::ReadFault: return "read-fault";
    case FaultReason::WriteFault: return "write-fault";
    case FaultReason::InvalidOpcode: return "invalid-opcode";
    case FaultReason::StackFault: return "stack-fault";
  }
  return "unknown";
}

// --- MemoryMap ---------------------------------------------------------

bool MemoryMap::map_region(uint32_t base, uint32_t size, uint8_t perms) {
  if (size == 0 || base % kPage != 0) return false;
  size = round_up_pages(size);
  if (uint64_t(base) + size > 0x100000000ULL) return false;
  if ((perms & kPermWrite) && (perms & kPermExec)) return false;
  // neighbors: first region at or after base, and the one before it
  auto it = regions_.lower_bound(base);
  if (it != regions_.end() && it->first < uint64_t(base) + size) return false;
  if (it != regions_.begin()) {
    auto prev = std::prev(it);
    if (uint64_t(prev->first) + prev->second.size > base) return false;
  }
  regions_.emplace(base, Region{size, perms});
  return true;
}

bool MemoryMap::range_mapped(uint32_t base, uint32_t size) const {
  uint64_t addr = base;
  const uint64_t end = uint64_t(base) + size;
  while (addr < end) {
    uint32_t rbase = 0;
    const Region* r = region_containing(static_cast<uint32_t>(addr), &rbase);
    if (!r) return false;
    addr = uint64_t(rbase) + r->size;
  }
  return true;
}

bool MemoryMap::unmap_region(uint32_t base, uint32_t size) {
  if (size == 0 || base % kPage != 0 || size % kPage != 0) return false;
  const uint64_t end = uint64_t(base) + size;
  if (end > 0x100000000ULL) return false;
  if (!range_mapped(base, size)) return false;
  // Split boundary regions, drop interior ones, then the pages.
  uint64_t addr = base;
  while (addr < end) {
    uint32_t rbase = 0;
    const Region* r = region_containing(static_cast<uint32_t>(addr), &rbase);
    Region copy = *r;
    regions_.erase(rbase);
    if (rbase < base)
      regions_.emplace(rbase, Region{base - rbase, copy.perms});
    const uint64_t rend = uint64_t(rbase) + copy.size;
    if (rend > end)
      regions_.emplace(static_cast<uint32_t>(end),
                       Region{static_cast<uint32_t>(rend - end), copy.perms});
    addr = rend;
  }
  for (uint64_t p = base; p < end; p += kPage)
    pages_.erase(static_cast<uint32_t>(p));
  return true;
}

const MemoryMap::Region* MemoryMap::region_containing(uint32_t addr,
                                                      uint32_t* region_base) const {
  auto it = regions_.upper_bound(addr);
  if (it == regions_.begin()) return nullptr;
  --it;
  if (uint64_t(it->first) + it->second.size <= addr) return nullptr;
  if (region_base) *region_base = it->first;
  return &it->second;
}

uint8_t MemoryMap::perms_at(uint32_t addr) const {
  const Region* r = region_containing(addr, nullptr);
  return r ? r->perms : 0;
}

const uint8_t* MemoryMap::page_for_read(uint32_t base) const {
  auto it = pages_.find(base);
  if (it != pages_.end()) return it->second->data();
  return nullptr;  // uninstantiated page reads as zeros
}

uint8_t* MemoryMap::page_for_write(uint32_t base) {
  auto it = pages_.find(base);
  if (it == pages_.end()) {
    auto page = std::make_unique<std::array<uint8_t, pbf::kPageSize>>();
    page->fill(0);
    it = pages_.emplace(base, std::move(page)).first;
  }
  return it->second->data();
}

namespace {

// Walks [addr, addr+len) page by page, checking `need` perms against the map
// and invoking op(page_base, offset_in_page, span_offset, chunk_len).
template <typename Op>
bool walk(const MemoryMap& mem, uint32_t addr, size_t len, uint8_t need, Op&& op) {
  if (len == 0) return true;
  if (uint64_t(addr) + len > 0x100000000ULL) return false;
  size_t done = 0;
  while (done < len) {
    const uint32_t a = addr + static_cast<uint32_t>(done);
    if ((mem.perms_at(a) & need) != need) return false;
    const uint32_t base = page_base(a);
    const uint32_t in_page = a - base;
    const size_t chunk = std::min<size_t>(len - done, kPage - in_page);
    op(base, in_page, done, chunk);
    done += chunk;
  }
  return true;
}

}  // namespace

bool MemoryMap::read(uint32_t addr, std::span<uint8_t> out) const {
  return walk(*this, addr, out.size(), kPermRead,
              [&](uint32_t base, uint32_t in_page, size_t off, size_t chunk) {
                const uint8_t* page = page_for_read(base);
                if (page)
                  std::memcpy(out.data() + off, page + in_page, chunk);
                else
                  std::memset(out.data() + off, 0, chunk);
              });
}

bool MemoryMap::write(uint32_t addr, std::span<const uint8_t> data) {
  if (!walk(*this, addr, data.size(), kPermWrite,
            [](uint32_t, uint32_t, size_t, size_t) {}))
    return false;
  walk(*this, addr, data.size(), kPermWrite,
       [&](uint32_t base, uint32_t in_page, size_t off, size_t chunk) {
         std::memcpy(page_for_write(base) + in_page, data.data() + off, chunk);
       });
  return true;
}

bool MemoryMap::fetch(uint32_t addr,
                      std::span<uint8_t, isa::kInstructionSize> out) const {
  return walk(*this, addr, out.size(), kPermExec,
              [&](uint32_t base, uint32_t in_page, size_t off, size_t chunk) {
                const uint8_t* page = page_for_read(base);
                if (page)
                  std::memcpy(out.data() + off, page + in_page, chunk);
                else
                  std::memset(out.data() + off, 0, chunk);
              });
}

bool semantically_equal(const MemoryMap& a, const MemoryMap& b) {
  auto region_eq = [](const MemoryMap::Region& x, const MemoryMap::Region& y) {
    return x.size == y.size && x.perms == y.perms;
  };
  if (a.regions_.size() != b.regions_.size()) return false;
  for (auto ia = a.regions_.begin(), ib = b.regions_.begin(); ia != a.regions_.end();
       ++ia, ++ib)
    if (ia->first != ib->first || !region_eq(ia->second, ib->second)) return false;

  static const std::array<uint8_t, pbf::kPageSize> zeros{};
  auto page_matches = [&](const MemoryMap& x, const MemoryMap& y, uint32_t base) {
    auto ix = x.pages_.find(base);
    auto iy = y.pages_.find(base);
    const uint8_t* px = ix != x.pages_.end() ? ix->second->data() : zeros.data();
    const uint8_t* py = iy != y.pages_.end() ? iy->second->data() : zeros.data();
    return std::memcmp(px, py, pbf::kPageSize) == 0;
  };
  for (const auto& [base, page] : a.pages_)
    if (!page_matches(a, b, base)) return false;
  for (const auto& [base, page] : b.pages_)
    if (!page_matches(a, b, base)) return false;
  return true;
}

// --- io helpers ---------------------------------------------------------

uint32_t BufferIo::transmit(std::span<const uint8_t> data) {
  output_.insert(output_.end(), data.begin(), data.end());
  return static_cast<uint32_t>(data.size());
}

uint32_t BufferIo::receive(std::span<uint8_t> out) {
  const size_t n = std::min(out.size(), input_.size() - pos_);
  std::memcpy(out.data(), input_.data() + pos_, n);
  pos_ += n;
  return static_cast<uint32_t>(n);
}

uint32_t ChunkedIo::transmit(std::span<const uint8_t> data) {
  output_.insert(output_.end(), data.begin(), data.end());
  return static_cast<uint32_t>(data.size());
}

uint32_t ChunkedIo::receive(std::span<uint8_t> out) {
  while (chunk_ < chunks_.size() && pos_ >= chunks_[chunk_].size()) {
    ++chunk_;
    pos_ = 0;
  }
  if (chunk_ >= chunks_.size()) return 0;
  const auto& c = chunks_[chunk_];
  const size_t n = std::min(out.size(), c.size() - pos_);
  std::memcpy(out.data(), c.data() + pos_, n);
  pos_ += n;
  return static_cast<uint32_t>(n);
}

// --- loading ------------------------------------------------------------

std::vector<uint8_t> make_secret(uint64_t secret_seed) {
  util::SplitMix64 rng(secret_seed);
  std::vector<uint8_t> secret(kSecretSize);
  for (size_t i = 0; i < secret.size(); i += 8) {
    uint64_t v = rng.next();
    for (size_t j = 0; j < 8; ++j) secret[i + j] = static_cast<uint8_t>(v >> (8 * j));
  }
  return secret;
}

struct LoaderAccess {
  // Loader-only raw write: section payloads land in pages before the perms
  // ever matter to the program.
  static void poke(MemoryMap& mem, uint32_t addr, std::span<const uint8_t> data) {
    size_t done = 0;
    while (done < data.size()) {
      const uint32_t a = addr + static_cast<uint32_t>(done);
      const uint32_t base = page_base(a);
      const uint32_t in_page = a - base;
      const size_t chunk = std::min<size_t>(data.size() - done, kPage - in_page);
      std::memcpy(mem.page_for_write(base) + in_page, data.data() + done, chunk);
      done += chunk;
    }
  }
};

MachineState load_image(const pbf::PandoraBinary& b, uint64_t seed,
                        std::span<const uint8_t> secret, uint64_t budget) {
  if (secret.size() != kSecretSize)
    throw std::invalid_argument("secret must be exactly one page");
  MachineState s;
  for (const auto& sec : b.sections) {
    if (!s.memory.map_region(sec.vaddr, sec.mem_size, sec.perms))
      throw MapConflict("section mapping conflict at 0x" + util::hex32(sec.vaddr));
    LoaderAccess::poke(s.memory, sec.vaddr, sec.payload);
  }
  if (!s.memory.map_region(kStackBase, kStackLimit - kStackBase,
                           kPermRead | kPermWrite))
    throw MapConflict("section overlaps the stack region");
  if (!s.memory.map_region(kSecretVaddr, kSecretSize, kPermRead))
    throw MapConflict("section overlaps the secret page");
  LoaderAccess::poke(s.memory, kSecretVaddr, secret);
  s.regs[isa::kStackRegister] = kStackTop;
  s.ip = b.header.entry;
  s.budget = budget;
  s.prng = util::SplitMix64(seed);
  return s;
}

bool states_equal(const MachineState& a, const MachineState& b) {
  return a.regs == b.regs && a.ip == b.ip && a.flag_z == b.flag_z &&
         a.flag_l == b.flag_l && a.budget == b.budget && a.prng == b.prng &&
         semantically_equal(a.memory, b.memory);
}

// --- execution ----------------------------------------------------------

namespace {

// Allocation arena state lives in the memory map itself: the next candidate
// base is rediscovered by scanning, which keeps MachineState copy-free.
uint32_t find_alloc_base(const MemoryMap& mem, uint32_t size) {
  uint32_t base = kAllocBase;
  while (uint64_t(base) + size <= kAllocLimit) {
    bool conflict = false;
    for (uint64_t p = base; p < uint64_t(base) + size; p += kPage) {
      if (mem.perms_at(static_cast<uint32_t>(p)) != 0) {
        conflict = true;
        base = static_cast<uint32_t>(p) + kPage;
        break;
      }
    }
    if (!conflict) return base;
  }
  return 0;
}

struct Flow {
  StepResult result;
  bool done = false;
};

Flow fault(MachineState& s, FaultReason reason, uint32_t fault_ip, uint32_t site_ip) {
  StepResult r;
  r.kind = StepResult::Kind::Faulted;
  r.fault.reason = reason;
  r.fault.fault_ip = fault_ip;
  r.fault.site_ip = site_ip;
  r.fault.regs = s.regs;
  return {r, true};
}

uint32_t syscall_dispatch(MachineState& s, VmIo& io, bool& terminated,
                          uint32_t& exit_status) {
  const uint32_t nr = s.regs[0];
  const uint32_t a1 = s.regs[1], a2 = s.regs[2], a3 = s.regs[3];
  switch (nr) {
    case 1:  // terminate(status)
      terminated = true;
      exit_status = a1;
      return 0;
    case 2: {  // transmit(fd, addr, len) -> bytes written
      if (a1 != 1) return kErr;
      if (a3 == 0) return 0;
      std::vector<uint8_t> buf(a3);
      if (!s.memory.read(a2, buf)) return kErr;
      return io.transmit(buf);
    }
    case 3: {  // receive(fd, addr, len) -> bytes read, 0 on closed stream
      if (a1 != 0) return kErr;
      if (a3 == 0) return 0;
      std::vector<uint8_t> buf(a3);
      if (!s.memory.write(a2, buf)) return kErr;  // probe writability first
      const uint32_t n = io.receive(buf);
      if (n > 0) s.memory.write(a2, std::span<const uint8_t>(buf.data(), n));
      return n;
    }
    case 4:  // fdwait -> readiness bitmask, bit 0 = stdin readable
      io.wait_stdin();
      return 1;
    case 5: {  // allocate(len) -> page-aligned base
      if (a1 == 0) return kErr;
      const uint32_t size = round_up_pages(a1);
      const uint32_t base = find_alloc_base(s.memory, size);
      if (base == 0) return kErr;
      if (!s.memory.map_region(base, size, kPermRead | kPermWrite)) return kErr;
      return base;
    }
    case 6: {  // deallocate(addr, len) -> 0 / error
      if (a2 == 0 || a1 % kPage != 0) return kErr;
      const uint32_t size = round_up_pages(a2);
      if (a1 < kAllocBase || uint64_t(a1) + size > kAllocLimit) return kErr;
      return s.memory.unmap_region(a1, size) ? 0 : kErr;
    }
    case 7: {  // random(addr, len) -> len
      if (a2 == 0) return 0;
      std::vector<uint8_t> buf(a2);
      for (size_t i = 0; i < buf.size(); i += 8) {
        uint64_t v = s.prng.next();
        for (size_t j = 0; j < 8 && i + j < buf.size(); ++j)
          buf[i + j] = static_cast<uint8_t>(v >> (8 * j));
      }
      if (!s.memory.write(a1, buf)) return kErr;
      return a2;
    }
    default:
      return kErr;
  }
}

}  // namespace

StepResult step(MachineState& s, VmIo& io) {
  const uint32_t at = s.ip;
  uint8_t raw[isa::kInstructionSize];
  if (!s.memory.fetch(at, std::span<uint8_t, isa::kInstructionSize>(raw))) {
    // Fall-through or prior transfer into unfetchable memory.
    StepResult r = fault(s, FaultReason::ExecFault, at, at).result;
    r.began = false;
    return r;
  }
  const isa::Instruction ins =
      isa::decode(std::span<const uint8_t, isa::kInstructionSize>(raw));
  if (s.budget > 0) --s.budget;

  auto regs_ok = [&](std::initializer_list<uint8_t> fields) {
    for (uint8_t f : fields)
      if (f >= isa::kRegisterCount) return false;
    return true;
  };
  auto invalid = [&] { return fault(s, FaultReason::InvalidOpcode, at, at).result; };

  uint32_t next_ip = at + isa::kInstructionSize;

  // Control transfer with an immediate execute check, so a hijacked return
  // lands in the fault record with fault_ip = attempted target.
  auto transfer = [&](uint32_t target) -> std::optional<StepResult> {
    if ((s.memory.perms_at(target) & kPermExec) == 0)
      return fault(s, FaultReason::ExecFault, target, at).result;
    next_ip = target;
    return std::nullopt;
  };

  switch (ins.opcode) {
    case isa::Opcode::Invalid:
      return invalid();
    case isa::Opcode::Movi:
      if (!regs_ok({ins.rd})) return invalid();
      s.regs[ins.rd] = ins.imm;
      break;
    case isa::Opcode::Mov:
      if (!regs_ok({ins.rd, ins.rs1})) return invalid();
      s.regs[ins.rd] = s.regs[ins.rs1];
      break;
    case isa::Opcode::Add:
      if (!regs_ok({ins.rd, ins.rs1, ins.rs2})) return invalid();
      s.regs[ins.rd] = s.regs[ins.rs1] + s.regs[ins.rs2];
      break;
    case isa::Opcode::Addi:
      if (!regs_ok({ins.rd, ins.rs1})) return invalid();
      s.regs[ins.rd] = s.regs[ins.rs1] + ins.imm;
      break;
    case isa::Opcode::Sub:
      if (!regs_ok({ins.rd, ins.rs1, ins.rs2})) return invalid();
      s.regs[ins.rd] = s.regs[ins.rs1] - s.regs[ins.rs2];
      break;
    case isa::Opcode::Xor:
      if (!regs_ok({ins.rd, ins.rs1, ins.rs2})) return invalid();
      s.regs[ins.rd] = s.regs[ins.rs1] ^ s.regs[ins.rs2];
      break;
    case isa::Opcode::And:
      if (!regs_ok({ins.rd, ins.rs1, ins.rs2})) return invalid();
      s.regs[ins.rd] = s.regs[ins.rs1] & s.regs[ins.rs2];
      break;
    case isa::Opcode::Or:
      if (!regs_ok({ins.rd, ins.rs1, ins.rs2})) return invalid();
      s.regs[ins.rd] = s.regs[ins.rs1] | s.regs[ins.rs2];
      break;
    case isa::Opcode::Cmp:
      if (!regs_ok({ins.rs1, ins.rs2})) return invalid();
      s.flag_z = s.regs[ins.rs1] == s.regs[ins.rs2];
      s.flag_l = s.regs[ins.rs1] < s.regs[ins.rs2];
      break;
    case isa::Opcode::Cmpi:
      if (!regs_ok({ins.rs1})) return invalid();
      s.flag_z = s.regs[ins.rs1] == ins.imm;
      s.flag_l = s.regs[ins.rs1] < ins.imm;
      break;
    case isa::Opcode::Jmp:
      if (auto f = transfer(ins.imm)) return *f;
      break;
    case isa::Opcode::Jz:
      if (s.flag_z)
        if (auto f = transfer(ins.imm)) return *f;
      break;
    case isa::Opcode::Jnz:
      if (!s.flag_z)
        if (auto f = transfer(ins.imm)) return *f;
      break;
    case isa::Opcode::Jl:
      if (s.flag_l)
        if (auto f = transfer(ins.imm)) return *f;
      break;
    case isa::Opcode::Call: {
      const uint32_t sp = s.regs[isa::kStackRegister] - 4;
      uint8_t ret_bytes[4];
      util::wr_u32_at(ret_bytes, at + isa::kInstructionSize);
      if (!s.memory.write(sp, ret_bytes))
        return fault(s, FaultReason::StackFault, at, at).result;
      s.regs[isa::kStackRegister] = sp;
      if (auto f = transfer(ins.imm)) return *f;
      break;
    }
    case isa::Opcode::Push: {
      if (!regs_ok({ins.rs1})) return invalid();
      const uint32_t sp = s.regs[isa::kStackRegister] - 4;
      uint8_t bytes[4];
      util::wr_u32_at(bytes, s.regs[ins.rs1]);
      if (!s.memory.write(sp, bytes))
        return fault(s, FaultReason::StackFault, at, at).result;
      s.regs[isa::kStackRegister] = sp;
      break;
    }
    case isa::Opcode::Pop: {
      if (!regs_ok({ins.rd})) return invalid();
      uint8_t bytes[4];
      if (!s.memory.read(s.regs[isa::kStackRegister], bytes))
        return fault(s, FaultReason::StackFault, at, at).result;
      s.regs[ins.rd] = util::rd_u32(bytes);
      s.regs[isa::kStackRegister] += 4;
      break;
    }
    case isa::Opcode::Ret: {
      uint8_t bytes[4];
      if (!s.memory.read(s.regs[isa::kStackRegister], bytes))
        return fault(s, FaultReason::StackFault, at, at).result;
      s.regs[isa::kStackRegister] += 4;
      if (auto f = transfer(util::rd_u32(bytes))) return *f;
      break;
    }
    case isa::Opcode::Ldw: {
      if (!regs_ok({ins.rd, ins.rs1})) return invalid();
      const uint32_t addr = s.regs[ins.rs1] + ins.imm;
      uint8_t bytes[4];
      if (!s.memory.read(addr, bytes))
        return fault(s, FaultReason::ReadFault, at, at).result;
      s.regs[ins.rd] = util::rd_u32(bytes);
      break;
    }
    case isa::Opcode::Stw: {
      if (!regs_ok({ins.rs1, ins.rs2})) return invalid();
      const uint32_t addr = s.regs[ins.rs1] + ins.imm;
      uint8_t bytes[4];
      util::wr_u32_at(bytes, s.regs[ins.rs2]);
      if (!s.memory.write(addr, bytes))
        return fault(s, FaultReason::WriteFault, at, at).result;
      break;
    }
    case isa::Opcode::Ldb: {
      if (!regs_ok({ins.rd, ins.rs1})) return invalid();
      const uint32_t addr = s.regs[ins.rs1] + ins.imm;
      uint8_t byte;
      if (!s.memory.read(addr, std::span<uint8_t>(&byte, 1)))
        return fault(s, FaultReason::ReadFault, at, at).result;
      s.regs[ins.rd] = byte;
      break;
    }
    case isa::Opcode::Stb: {
      if (!regs_ok({ins.rs1, ins.rs2})) return invalid();
      const uint32_t addr = s.regs[ins.rs1] + ins.imm;
      const uint8_t byte = static_cast<uint8_t>(s.regs[ins.rs2]);
      if (!s.memory.write(addr, std::span<const uint8_t>(&byte, 1)))
        return fault(s, FaultReason::WriteFault, at, at).result;
      break;
    }
    case isa::Opcode::Sys: {
      bool terminated = false;
      uint32_t status = 0;
      const uint32_t ret = syscall_dispatch(s, io, terminated, status);
      if (terminated) {
        StepResult r;
        r.kind = StepResult::Kind::Exited;
        r.exit_status = status;
        return r;
      }
      s.regs[0] = ret;
      break;
    }
    case isa::Opcode::Nop:
      break;
  }

  s.ip = next_ip;
  StepResult r;
  r.kind = StepResult::Kind::Ran;
  return r;
}

ExecOutcome run(const pbf::PandoraBinary& b, uint64_t seed,
                std::span<const uint8_t> secret, VmIo& io,
                const RunOptions& options) {
  MachineState s = load_image(b, seed, secret, options.budget);
  ExecOutcome out;
  uint32_t prev_ip = 0;
  bool have_prev = false;
  while (true) {
    if (s.budget == 0) {
      out.kind = ExecOutcome::Kind::BudgetExhausted;
      break;
    }
    const uint32_t at = s.ip;
    const StepResult r = step(s, io);
    if (r.began) {
      ++out.executed;
      if (options.collect_trace) out.trace.push_back(at);
      if (options.collect_edges && have_prev)
        out.edges.insert(ExecOutcome::edge_key(prev_ip, at));
      prev_ip = at;
      have_prev = true;
    }
    if (r.kind == StepResult::Kind::Exited) {
      out.kind = ExecOutcome::Kind::Exited;
      out.exit_status = r.exit_status;
      break;
    }
    if (r.kind == StepResult::Kind::Faulted) {
      out.kind = ExecOutcome::Kind::Faulted;
      out.fault = r.fault;
      break;
    }
  }
  return out;
}

}  // namespace pandora::svm
