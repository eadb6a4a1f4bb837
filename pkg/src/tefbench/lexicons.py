"""Fixed lexicons shared by the corpus generator and the feature extractor.

These constants ship with the repository so detectors trained in different
runs learn comparable concepts.
"""

# 16 eight-byte marker n-grams planted in malicious payloads.
MARKERS: tuple[bytes, ...] = (
    b"\xde\xad\xbe\xefMK01",
    b"\xfe\xed\xfa\xceMK02",
    b"\xba\xad\xc0\xdeMK03",
    b"\xca\xfe\xba\xbeMK04",
    b"\x0b\x00\xb5\x12MK05",
    b"\xde\xfe\xc8\xedMK06",
    b"\xab\xad\x1d\xeaMK07",
    b"\xd1\x5e\xa5\xe9MK08",
    b"\x0d\xdf\x00\x0dMK09",
    b"\xb1\x6b\x00\xb5MK10",
    b"\xf0\x0d\xca\xfeMK11",
    b"\x8b\xad\xf0\x0dMK12",
    b"\xfa\xce\xfe\xedMK13",
    b"\xc0\x01\xd0\x0dMK14",
    b"\x13\x37\xbe\xefMK15",
    b"\x66\x6e\x0f\x91MK16",
)

# Dictionary words used for benign strings and string features.
BENIGN_WORDS: tuple[str, ...] = (
    "configuration", "settings", "version", "library", "update",
    "service", "manager", "network", "resource", "install",
    "registry", "profile", "document", "support", "license",
    "windows", "system", "application", "module", "session",
    "driver", "display", "keyboard", "language", "default",
    "options", "security", "backup", "restore", "monitor",
    "printer", "storage",
)

# Benign section names. Their 9-way name-hash bins ({0,2,4,5,6}) are disjoint
# from the shady names' bins ({1,3,7,8}), so renaming a freshly generated
# malicious section always moves a hashed-name feature.
BENIGN_SECTION_NAMES: tuple[str, ...] = (
    "text", "data", "rdata", "rsrc", "rodata", "reloc",
    "didat", "ndata", "init", "sdata", "tls", "cfg",
)

# Section names favoured by the malicious generator.
SHADY_SECTION_NAMES: tuple[str, ...] = (
    "sx", "mz0", "blob", "t7t", "pk0", "kk3", "enc1", "krnl0",
)

# Benign import libraries with their symbol pools.
BENIGN_IMPORTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("kernel32", ("CreateFileW", "ReadFile", "WriteFile", "CloseHandle", "GetTickCount")),
    ("user32", ("MessageBoxW", "CreateWindowW", "ShowWindow", "GetDC")),
    ("gdi32", ("BitBlt", "CreateFontW", "SelectObject")),
    ("advapi", ("RegOpenKeyW", "RegQueryValueW", "RegCloseKey")),
    ("shell32", ("ShellExecuteW", "SHGetFolderPathW")),
    ("ole32", ("CoInitialize", "CoCreateInstance")),
    ("comctl", ("InitCommonControls", "ImageListCreate")),
    ("msvcrt", ("malloc", "free", "memcpy", "printf", "strlen")),
    ("ws2_32", ("socket", "connect", "send", "recv")),
    ("crypt32", ("CertOpenStore", "CryptHashData")),
    ("imm32", ("ImmGetContext", "ImmReleaseContext")),
    ("setupapi", ("SetupDiGetClassDevs", "SetupDiEnumDeviceInfo")),
    ("shlwapi", ("PathCombineW", "StrStrW")),
    ("rpcrt4", ("RpcStringFreeW", "UuidCreate")),
    ("oleaut", ("SysAllocString", "VariantInit")),
    ("version", ("GetFileVersionInfoW", "VerQueryValueW")),
)

# Libraries characteristic of the malicious generator; a small fraction of
# benign binaries also carries one (dual-use tooling) so no single import
# can perfectly separate the classes.
SUSPICIOUS_IMPORTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("inject32", ("RemoteThread", "WriteTarget", "MapStub")),
    ("keyhookd", ("InstallHook", "PollKeys")),
    ("cryptloot", ("ScanWallet", "SealFiles")),
    ("networm", ("Spread", "Beacon", "PullTask")),
    ("rootkitd", ("HideProc", "PatchTable")),
    ("packmeup", ("StubEntry", "Inflate")),
    ("stealdll", ("GrabForms", "DumpVault")),
    ("botcmdr", ("Register", "RunCmd", "Exfil")),
)

BENIGN_LIB_NAMES: tuple[str, ...] = tuple(name for name, _ in BENIGN_IMPORTS)
SUSPICIOUS_LIB_NAMES: tuple[str, ...] = tuple(name for name, _ in SUSPICIOUS_IMPORTS)
